#include "twinforge/toyzoo.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "twinforge/errors.hpp"
#include "twinforge/rng.hpp"

namespace twinforge {

namespace {

constexpr double kNoiseSigma = 0.5;

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Tensor gaussian_matrix(int64_t rows, int64_t cols, double stddev, Rng& rng) {
    std::vector<float> data(static_cast<size_t>(rows * cols));
    for (auto& v : data) v = static_cast<float>(rng.gaussian() * stddev);
    return Tensor({rows, cols}, std::move(data));
}

// Random orthogonal matrix: QR of a Gaussian matrix with column signs fixed
// by the R diagonal.
Eigen::MatrixXd random_rotation(int64_t d, Rng& rng) {
    Eigen::MatrixXd g(d, d);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) g(i, j) = rng.gaussian();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int64_t j = 0; j < d; ++j) {
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    }
    return q;
}

}  // namespace

std::span<const float> Dataset::row(int64_t i) const {
    const int64_t d = x.cols();
    return {x.data() + i * d, static_cast<size_t>(d)};
}

TaskSuite TaskSuite::generate(const SuiteConfig& cfg) {
    if (cfg.task_count < 1) throw ArgumentError("suite needs at least one task");
    if (cfg.feature_dim < 1 || cfg.classes < 2) throw ArgumentError("bad suite dimensions");
    if (cfg.n_per_task < cfg.classes) throw ArgumentError("suite too small for class count");
    if (!(cfg.shared_strength >= 0.0 && cfg.shared_strength <= 1.0)) {
        throw ArgumentError("shared_strength must be in [0, 1]");
    }
    if (!(cfg.train_frac > 0.0 && cfg.val_frac >= 0.0 && cfg.train_frac + cfg.val_frac < 1.0)) {
        throw ArgumentError("invalid split fractions");
    }

    TaskSuite suite;
    suite.feature_dim = cfg.feature_dim;
    suite.classes = cfg.classes;
    suite.shared_strength = cfg.shared_strength;
    suite.layout_center = cfg.layout_center;
    suite.layout_spread = cfg.layout_spread;
    suite.seed = cfg.seed;

    if (cfg.alphas.empty()) {
        suite.alphas.assign(static_cast<size_t>(cfg.task_count),
                            1.0 / static_cast<double>(cfg.task_count));
    } else {
        if (static_cast<int64_t>(cfg.alphas.size()) != cfg.task_count) {
            throw ArgumentError("alphas length must equal task count");
        }
        double sum = 0.0;
        for (double a : cfg.alphas) {
            if (!(a > 0.0)) throw ArgumentError("alphas must be positive");
            sum += a;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw ArgumentError("alphas must sum to 1");
        suite.alphas = cfg.alphas;
    }

    Rng root(cfg.seed);

    // Global cluster layout; independent of the task count and strength so
    // suites generated from the same seed share it.
    Rng grng = root.fork("global");
    Eigen::VectorXd center(cfg.feature_dim);
    for (int64_t j = 0; j < cfg.feature_dim; ++j) center(j) = grng.gaussian();
    center *= cfg.layout_center / center.norm();
    Eigen::MatrixXd global(cfg.classes, cfg.feature_dim);
    for (int64_t k = 0; k < cfg.classes; ++k)
        for (int64_t j = 0; j < cfg.feature_dim; ++j) {
            global(k, j) = center(j) + cfg.layout_spread * grng.gaussian();
        }

    const int64_t n = cfg.n_per_task;
    const int64_t n_train = static_cast<int64_t>(std::llround(cfg.train_frac * static_cast<double>(n)));
    const int64_t n_val = static_cast<int64_t>(std::llround(cfg.val_frac * static_cast<double>(n)));
    const int64_t n_test = n - n_train - n_val;
    if (n_test < 1) throw ArgumentError("split fractions leave no test data");

    for (int64_t t = 0; t < cfg.task_count; ++t) {
        Rng rot_rng = root.fork("task" + std::to_string(t) + ".rotation");
        Eigen::MatrixXd rot = random_rotation(cfg.feature_dim, rot_rng);
        // Class means: shared_strength of the global layout plus the rest
        // from a task-specific rotation of it.
        Eigen::MatrixXd means = cfg.shared_strength * global +
                                (1.0 - cfg.shared_strength) * global * rot.transpose();

        Rng data_rng = root.fork("task" + std::to_string(t) + ".data");
        std::vector<int> labels(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = static_cast<int>(i % cfg.classes);
        data_rng.shuffle(labels);

        std::vector<float> xs(static_cast<size_t>(n * cfg.feature_dim));
        for (int64_t i = 0; i < n; ++i) {
            int k = labels[static_cast<size_t>(i)];
            for (int64_t j = 0; j < cfg.feature_dim; ++j) {
                xs[static_cast<size_t>(i * cfg.feature_dim + j)] =
                    static_cast<float>(means(k, j) + kNoiseSigma * data_rng.gaussian());
            }
        }

        auto slice = [&](int64_t begin, int64_t count) {
            Dataset d;
            std::vector<float> sx(xs.begin() + begin * cfg.feature_dim,
                                  xs.begin() + (begin + count) * cfg.feature_dim);
            d.x = Tensor({count, cfg.feature_dim}, std::move(sx));
            d.y.assign(labels.begin() + begin, labels.begin() + begin + count);
            return d;
        };
        TaskData td;
        td.train = slice(0, n_train);
        td.val = slice(n_train, n_val);
        td.test = slice(n_train + n_val, n_test);
        suite.tasks.push_back(std::move(td));
    }
    return suite;
}

void TaskSuite::save(const std::filesystem::path& path) const {
    Checkpoint::ParamMap params;
    std::vector<std::string> split_descr;
    for (int64_t t = 0; t < task_count(); ++t) {
        const TaskData& td = tasks[static_cast<size_t>(t)];
        const int64_t n = td.train.size() + td.val.size() + td.test.size();
        std::vector<float> xs;
        xs.reserve(static_cast<size_t>(n * feature_dim));
        std::vector<float> ys;
        ys.reserve(static_cast<size_t>(n));
        for (const Dataset* d : {&td.train, &td.val, &td.test}) {
            xs.insert(xs.end(), d->x.values().begin(), d->x.values().end());
            for (int y : d->y) ys.push_back(static_cast<float>(y));
        }
        params["task" + std::to_string(t) + ".x"] = Tensor({n, feature_dim}, std::move(xs));
        params["task" + std::to_string(t) + ".y"] = Tensor({n}, std::move(ys));
    }
    const TaskData& first = tasks.front();
    Checkpoint::MetaMap meta;
    meta["kind"] = "suite";
    meta["seed"] = std::to_string(seed);
    meta["classes"] = std::to_string(classes);
    meta["shared_strength"] = fmt_double(shared_strength);
    meta["layout_center"] = fmt_double(layout_center);
    meta["layout_spread"] = fmt_double(layout_spread);
    meta["splits"] = std::to_string(first.train.size()) + "," + std::to_string(first.val.size()) +
                     "," + std::to_string(first.test.size());
    std::string alpha_str;
    for (size_t i = 0; i < alphas.size(); ++i) {
        if (i) alpha_str += ",";
        alpha_str += fmt_double(alphas[i]);
    }
    meta["alphas"] = alpha_str;
    save_checkpoint(Checkpoint(std::move(params), std::move(meta)), path);
}

TaskSuite TaskSuite::load(const std::filesystem::path& path) {
    Checkpoint c = load_checkpoint(path);
    auto kind = c.meta().find("kind");
    if (kind == c.meta().end() || kind->second != "suite") {
        throw FormatError("'" + path.string() + "' is not a task-suite file");
    }
    TaskSuite suite;
    suite.seed = std::stoull(c.meta().at("seed"));
    suite.classes = std::stoll(c.meta().at("classes"));
    suite.shared_strength = std::stod(c.meta().at("shared_strength"));
    suite.layout_center = std::stod(c.meta().at("layout_center"));
    suite.layout_spread = std::stod(c.meta().at("layout_spread"));

    std::vector<int64_t> splits;
    {
        std::stringstream ss(c.meta().at("splits"));
        std::string item;
        while (std::getline(ss, item, ',')) splits.push_back(std::stoll(item));
    }
    if (splits.size() != 3) throw FormatError("suite splits metadata malformed");
    {
        std::stringstream ss(c.meta().at("alphas"));
        std::string item;
        while (std::getline(ss, item, ',')) suite.alphas.push_back(std::stod(item));
    }

    for (int64_t t = 0;; ++t) {
        std::string xname = "task" + std::to_string(t) + ".x";
        std::string yname = "task" + std::to_string(t) + ".y";
        if (!c.has(xname)) break;
        const Tensor& x = c.at(xname);
        const Tensor& y = c.at(yname);
        if (x.rows() != y.size()) throw FormatError("suite tensors disagree on item count");
        suite.feature_dim = x.cols();
        if (splits[0] + splits[1] + splits[2] != x.rows()) {
            throw FormatError("suite splits do not cover the data");
        }
        auto slice = [&](int64_t begin, int64_t count) {
            Dataset d;
            std::vector<float> sx(x.data() + begin * x.cols(), x.data() + (begin + count) * x.cols());
            d.x = Tensor({count, x.cols()}, std::move(sx));
            d.y.reserve(static_cast<size_t>(count));
            for (int64_t i = begin; i < begin + count; ++i) {
                d.y.push_back(static_cast<int>(std::lround(y.at(i))));
            }
            return d;
        };
        TaskData td;
        td.train = slice(0, splits[0]);
        td.val = slice(splits[0], splits[1]);
        td.test = slice(splits[0] + splits[1], splits[2]);
        suite.tasks.push_back(std::move(td));
    }
    if (suite.tasks.empty()) throw FormatError("suite file holds no tasks");
    return suite;
}

// ---------------------------------------------------------------------------
// ToyModel
// ---------------------------------------------------------------------------

ToyModel ToyModel::init(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.input_dim < 1 || cfg.hidden_dim < 1 || cfg.classes < 2) {
        throw ArgumentError("bad model dimensions");
    }
    Rng rng = Rng(seed).fork("model-init");
    ToyModel m;
    auto make_layer = [&](int64_t out, int64_t in) {
        Layer l;
        l.w = gaussian_matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
        l.b = Tensor::zeros({out});
        return l;
    };
    m.layers_.push_back(make_layer(cfg.hidden_dim, cfg.input_dim));
    m.layers_.push_back(make_layer(cfg.hidden_dim, cfg.hidden_dim));
    m.layers_.push_back(make_layer(cfg.classes, cfg.hidden_dim));
    return m;
}

ToyModel ToyModel::from_checkpoint(const Checkpoint& c) {
    ToyModel m;
    for (int i = 0; i < 3; ++i) {
        std::string prefix = "layer" + std::to_string(i);
        Layer l;
        l.w = c.at(prefix + ".w");
        l.b = c.at(prefix + ".b");
        if (l.w.rank() != 2 || l.b.rank() != 1 || l.w.rows() != l.b.size()) {
            throw FormatError("model layer '" + prefix + "' malformed");
        }
        m.layers_.push_back(std::move(l));
    }
    if (m.layers_[0].w.rows() != m.layers_[1].w.cols() ||
        m.layers_[1].w.rows() != m.layers_[2].w.cols()) {
        throw FormatError("model layer dimensions do not chain");
    }
    return m;
}

Checkpoint ToyModel::to_checkpoint() const {
    Checkpoint::ParamMap params;
    for (int i = 0; i < 3; ++i) {
        params["layer" + std::to_string(i) + ".w"] = layers_[static_cast<size_t>(i)].w;
        params["layer" + std::to_string(i) + ".b"] = layers_[static_cast<size_t>(i)].b;
    }
    return Checkpoint(std::move(params));
}

int64_t ToyModel::input_dim() const { return layers_[0].w.cols(); }
int64_t ToyModel::hidden_dim() const { return layers_[0].w.rows(); }
int64_t ToyModel::classes() const { return layers_[2].w.rows(); }

bool ToyModel::has_adapter() const {
    for (const auto& l : layers_) {
        if (l.adapter) return true;
    }
    return false;
}

const std::optional<AdapterPair>& ToyModel::adapter(int layer) const {
    return layers_[static_cast<size_t>(layer)].adapter;
}

void ToyModel::attach_adapter(int64_t rank, const std::vector<int>& layers, uint64_t seed) {
    if (rank < 1) throw ArgumentError("adapter rank must be >= 1");
    Rng rng = Rng(seed).fork("adapter-init");
    for (int idx : layers) {
        if (idx < 0 || idx >= 3) throw ArgumentError("adapter layer index out of range");
        Layer& l = layers_[static_cast<size_t>(idx)];
        const int64_t d_out = l.w.rows();
        const int64_t d_in = l.w.cols();
        const int64_t rho = std::min({rank, d_out, d_in});
        AdapterPair p;
        p.a = gaussian_matrix(rho, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
        p.b = Tensor::zeros({d_out, rho});  // effective weight starts at W
        l.adapter = std::move(p);
    }
}

Tensor ToyModel::effective_weight(int layer) const {
    const Layer& l = layers_[static_cast<size_t>(layer)];
    if (!l.adapter) return l.w;
    return add(l.w, matmul(l.adapter->b, l.adapter->a));
}

Checkpoint ToyModel::merge_adapter() const {
    if (!has_adapter()) throw StateError("merge_adapter: model has no adapter");
    Checkpoint::ParamMap params;
    for (int i = 0; i < 3; ++i) {
        params["layer" + std::to_string(i) + ".w"] = effective_weight(i);
        params["layer" + std::to_string(i) + ".b"] = layers_[static_cast<size_t>(i)].b;
    }
    return Checkpoint(std::move(params));
}

namespace {

void forward_vec(const Tensor& w, const Tensor& b, std::span<const float> in,
                 std::vector<float>& out, bool tanh_act) {
    const int64_t rows = w.rows(), cols = w.cols();
    out.resize(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
        double acc = b.at(i);
        for (int64_t j = 0; j < cols; ++j) {
            acc += static_cast<double>(w.at(i, j)) * static_cast<double>(in[static_cast<size_t>(j)]);
        }
        out[static_cast<size_t>(i)] = static_cast<float>(tanh_act ? std::tanh(acc) : acc);
    }
}

}  // namespace

std::vector<float> ToyModel::logits(std::span<const float> x) const {
    if (static_cast<int64_t>(x.size()) != input_dim()) {
        throw ArgumentError("input dimension " + std::to_string(x.size()) +
                            " does not match model input " + std::to_string(input_dim()));
    }
    std::vector<float> h1, h2, out;
    forward_vec(effective_weight(0), layers_[0].b, x, h1, true);
    forward_vec(effective_weight(1), layers_[1].b, h1, h2, true);
    forward_vec(effective_weight(2), layers_[2].b, h2, out, false);
    return out;
}

std::vector<float> ToyModel::embed(std::span<const float> x) const {
    if (static_cast<int64_t>(x.size()) != input_dim()) {
        throw ArgumentError("input dimension " + std::to_string(x.size()) +
                            " does not match model input " + std::to_string(input_dim()));
    }
    std::vector<float> h1, h2;
    forward_vec(effective_weight(0), layers_[0].b, x, h1, true);
    forward_vec(effective_weight(1), layers_[1].b, h1, h2, true);
    return h2;
}

int ToyModel::predict(std::span<const float> x) const {
    std::vector<float> l = logits(x);
    int best = 0;
    for (size_t i = 1; i < l.size(); ++i) {
        if (l[i] > l[best]) best = static_cast<int>(i);
    }
    return best;
}

double ToyModel::score(const Dataset& data) const {
    if (data.size() == 0) throw DataError("score: empty dataset");
    // Fold adapters once for the whole pass.
    Tensor w0 = effective_weight(0), w1 = effective_weight(1), w2 = effective_weight(2);
    int64_t correct = 0;
    std::vector<float> h1, h2, out;
    for (int64_t i = 0; i < data.size(); ++i) {
        forward_vec(w0, layers_[0].b, data.row(i), h1, true);
        forward_vec(w1, layers_[1].b, h1, h2, true);
        forward_vec(w2, layers_[2].b, h2, out, false);
        int best = 0;
        for (size_t j = 1; j < out.size(); ++j) {
            if (out[j] > out[best]) best = static_cast<int>(j);
        }
        if (best == data.y[static_cast<size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

double score(const ToyModel& m, const Dataset& data) { return m.score(data); }

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

class ToyTrainer {
public:
    ToyTrainer(ToyModel& m, const TrainConfig& cfg) : m_(m), cfg_(cfg) {}

    void fit(const Dataset& data, std::vector<double>* epoch_losses) {
        const int64_t n = data.size();
        const int64_t d = m_.input_dim();
        const int64_t h = m_.hidden_dim();
        const int64_t c = m_.classes();

        Rng root(cfg_.seed);
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);

        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            Rng shuffler = root.fork("epoch" + std::to_string(epoch));
            shuffler.shuffle(order);
            double loss_sum = 0.0;

            for (int64_t start = 0; start < n; start += cfg_.batch_size) {
                const int64_t bsz = std::min<int64_t>(cfg_.batch_size, n - start);
                Tensor w0 = m_.effective_weight(0);
                Tensor w1 = m_.effective_weight(1);
                Tensor w2 = m_.effective_weight(2);

                std::vector<double> x(static_cast<size_t>(bsz * d));
                std::vector<int> yb(static_cast<size_t>(bsz));
                for (int64_t b = 0; b < bsz; ++b) {
                    auto row = data.row(order[static_cast<size_t>(start + b)]);
                    for (int64_t j = 0; j < d; ++j) x[static_cast<size_t>(b * d + j)] = row[static_cast<size_t>(j)];
                    yb[static_cast<size_t>(b)] = data.y[static_cast<size_t>(order[static_cast<size_t>(start + b)])];
                }

                std::vector<double> h1 = affine_tanh(x, bsz, d, w0, m_.layers_[0].b, h);
                std::vector<double> h2 = affine_tanh(h1, bsz, h, w1, m_.layers_[1].b, h);
                std::vector<double> logits(static_cast<size_t>(bsz * c));
                for (int64_t b = 0; b < bsz; ++b) {
                    for (int64_t i = 0; i < c; ++i) {
                        double acc = m_.layers_[2].b.at(i);
                        for (int64_t j = 0; j < h; ++j) {
                            acc += static_cast<double>(w2.at(i, j)) * h2[static_cast<size_t>(b * h + j)];
                        }
                        logits[static_cast<size_t>(b * c + i)] = acc;
                    }
                }

                std::vector<double> dlogits(static_cast<size_t>(bsz * c));
                for (int64_t b = 0; b < bsz; ++b) {
                    double maxv = -std::numeric_limits<double>::infinity();
                    for (int64_t i = 0; i < c; ++i) maxv = std::max(maxv, logits[static_cast<size_t>(b * c + i)]);
                    double sum = 0.0;
                    for (int64_t i = 0; i < c; ++i) sum += std::exp(logits[static_cast<size_t>(b * c + i)] - maxv);
                    loss_sum -= logits[static_cast<size_t>(b * c + yb[static_cast<size_t>(b)])] - maxv - std::log(sum);
                    for (int64_t i = 0; i < c; ++i) {
                        double p = std::exp(logits[static_cast<size_t>(b * c + i)] - maxv) / sum;
                        dlogits[static_cast<size_t>(b * c + i)] =
                            (p - ((i == yb[static_cast<size_t>(b)]) ? 1.0 : 0.0)) / static_cast<double>(bsz);
                    }
                }
                if (!std::isfinite(loss_sum)) throw TrainingError("expert training diverged");

                // Backward.
                std::vector<double> dw2(static_cast<size_t>(c * h), 0.0), db2(static_cast<size_t>(c), 0.0);
                std::vector<double> dh2(static_cast<size_t>(bsz * h), 0.0);
                grads_affine(dlogits, h2, w2, bsz, h, c, dw2, db2, dh2);
                for (int64_t i = 0; i < bsz * h; ++i) {
                    double t = h2[static_cast<size_t>(i)];
                    dh2[static_cast<size_t>(i)] *= (1.0 - t * t);
                }
                std::vector<double> dw1(static_cast<size_t>(h * h), 0.0), db1(static_cast<size_t>(h), 0.0);
                std::vector<double> dh1(static_cast<size_t>(bsz * h), 0.0);
                grads_affine(dh2, h1, w1, bsz, h, h, dw1, db1, dh1);
                for (int64_t i = 0; i < bsz * h; ++i) {
                    double t = h1[static_cast<size_t>(i)];
                    dh1[static_cast<size_t>(i)] *= (1.0 - t * t);
                }
                std::vector<double> dw0(static_cast<size_t>(h * d), 0.0), db0(static_cast<size_t>(h), 0.0);
                std::vector<double> dx(static_cast<size_t>(bsz * d), 0.0);
                grads_affine(dh1, x, w0, bsz, d, h, dw0, db0, dx);

                update_layer(0, dw0, db0);
                update_layer(1, dw1, db1);
                update_layer(2, dw2, db2);
            }
            if (epoch_losses) epoch_losses->push_back(loss_sum / static_cast<double>(n));
        }
    }

private:
    std::vector<double> affine_tanh(const std::vector<double>& in, int64_t bsz, int64_t in_dim,
                                    const Tensor& w, const Tensor& b, int64_t out_dim) {
        std::vector<double> out(static_cast<size_t>(bsz * out_dim));
        for (int64_t bi = 0; bi < bsz; ++bi) {
            for (int64_t i = 0; i < out_dim; ++i) {
                double acc = b.at(i);
                for (int64_t j = 0; j < in_dim; ++j) {
                    acc += static_cast<double>(w.at(i, j)) * in[static_cast<size_t>(bi * in_dim + j)];
                }
                out[static_cast<size_t>(bi * out_dim + i)] = std::tanh(acc);
            }
        }
        return out;
    }

    void grads_affine(const std::vector<double>& dout, const std::vector<double>& in,
                      const Tensor& w, int64_t bsz, int64_t in_dim, int64_t out_dim,
                      std::vector<double>& dw, std::vector<double>& db, std::vector<double>& din) {
        for (int64_t bi = 0; bi < bsz; ++bi) {
            for (int64_t i = 0; i < out_dim; ++i) {
                double g = dout[static_cast<size_t>(bi * out_dim + i)];
                db[static_cast<size_t>(i)] += g;
                for (int64_t j = 0; j < in_dim; ++j) {
                    dw[static_cast<size_t>(i * in_dim + j)] += g * in[static_cast<size_t>(bi * in_dim + j)];
                    din[static_cast<size_t>(bi * in_dim + j)] += g * static_cast<double>(w.at(i, j));
                }
            }
        }
    }

    void update_layer(int idx, const std::vector<double>& dw_eff, const std::vector<double>& db) {
        auto& l = m_.layers_[static_cast<size_t>(idx)];
        if (cfg_.use_adapter) {
            if (!l.adapter) return;  // base frozen, layer not adapted
            // dA = B^T dW, dB = dW A^T; base weight and bias stay frozen.
            AdapterPair& p = *l.adapter;
            const int64_t rho = p.a.rows();
            const int64_t d_in = p.a.cols();
            const int64_t d_out = p.b.rows();
            std::vector<double> da(static_cast<size_t>(rho * d_in), 0.0);
            std::vector<double> dbb(static_cast<size_t>(d_out * rho), 0.0);
            for (int64_t r = 0; r < rho; ++r) {
                for (int64_t j = 0; j < d_in; ++j) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < d_out; ++i) {
                        acc += static_cast<double>(p.b.at(i, r)) * dw_eff[static_cast<size_t>(i * d_in + j)];
                    }
                    da[static_cast<size_t>(r * d_in + j)] = acc;
                }
            }
            for (int64_t i = 0; i < d_out; ++i) {
                for (int64_t r = 0; r < rho; ++r) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < d_in; ++j) {
                        acc += dw_eff[static_cast<size_t>(i * d_in + j)] * static_cast<double>(p.a.at(r, j));
                    }
                    dbb[static_cast<size_t>(i * rho + r)] = acc;
                }
            }
            momentum_step(p.a, vel_a_[static_cast<size_t>(idx)], da);
            momentum_step(p.b, vel_bb_[static_cast<size_t>(idx)], dbb);
        } else {
            momentum_step(l.w, vel_w_[static_cast<size_t>(idx)], dw_eff);
            momentum_step_vec(l.b, vel_b_[static_cast<size_t>(idx)], db);
        }
    }

    void momentum_step(Tensor& param, std::vector<float>& vel, const std::vector<double>& grad) {
        if (vel.size() != static_cast<size_t>(param.size())) vel.assign(static_cast<size_t>(param.size()), 0.0f);
        for (int64_t i = 0; i < param.size(); ++i) {
            size_t k = static_cast<size_t>(i);
            vel[k] = static_cast<float>(cfg_.momentum * vel[k] + grad[k]);
            param.at(i) = static_cast<float>(param.at(i) - cfg_.lr * vel[k]);
        }
    }
    void momentum_step_vec(Tensor& param, std::vector<float>& vel, const std::vector<double>& grad) {
        momentum_step(param, vel, grad);
    }

    ToyModel& m_;
    const TrainConfig& cfg_;
    // Momentum buffers, lazily sized on first use.
    std::vector<std::vector<float>> vel_w_ = std::vector<std::vector<float>>(3);
    std::vector<std::vector<float>> vel_b_ = std::vector<std::vector<float>>(3);
    std::vector<std::vector<float>> vel_a_ = std::vector<std::vector<float>>(3);
    std::vector<std::vector<float>> vel_bb_ = std::vector<std::vector<float>>(3);
};

ToyModel train_expert(const ToyModel& base, const Dataset& data, const TrainConfig& cfg,
                      std::vector<double>* epoch_losses) {
    if (data.size() == 0) throw DataError("train_expert: empty dataset");
    if (data.x.cols() != base.input_dim()) {
        throw CompatError("train_expert: data dimension does not match model input");
    }
    ToyModel m = base;
    if (cfg.use_adapter && !m.has_adapter()) {
        m.attach_adapter(cfg.adapter_rank, cfg.adapter_layers, cfg.seed);
    }
    ToyTrainer trainer(m, cfg);
    trainer.fit(data, epoch_losses);
    return m;
}

}  // namespace twinforge
