#include "qdetect/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "qdetect/binary_io.hpp"
#include "qdetect/error.hpp"
#include "qdetect/rng.hpp"

namespace qdetect::vit {

void VitConfig::validate() const {
    if (height < 1 || width < 1) throw ConfigError("image dimensions must be positive");
    if (patch < 1) throw ConfigError("patch size must be >= 1");
    if (height % patch != 0 || width % patch != 0) {
        throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                          " does not tile into " + std::to_string(patch) + "x" + std::to_string(patch) + " patches");
    }
    if (latent_dim < 1 || n_heads < 1) throw ConfigError("latent_dim and n_heads must be >= 1");
    if (!literal_heads && latent_dim % n_heads != 0) {
        throw ConfigError("latent_dim " + std::to_string(latent_dim) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(bn_eps > 0.0)) throw ConfigError("bn_eps must be > 0");
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw ConfigError("bn_momentum must be in (0, 1]");
}

VitConfig VitConfig::for_images(int height, int width, int n_ions) {
    VitConfig c;
    c.height = height;
    c.width = width;
    c.patch = n_ions == 1 ? 5 : 6;
    c.n_classes = 1 << n_ions;
    return c;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

template <typename P, typename F>
void visit_impl(P& p, F&& f) {
    f("embed", p.embed, true);
    f("pos", p.pos, true);
    f("cls", p.cls, true);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        auto& b = p.blocks[l];
        const std::string pre = "block" + std::to_string(l) + ".";
        for (std::size_t h = 0; h < b.heads.size(); ++h) {
            const std::string hp = pre + "head" + std::to_string(h) + ".";
            f(hp + "wq", b.heads[h].wq, true);
            f(hp + "wk", b.heads[h].wk, true);
            f(hp + "wv", b.heads[h].wv, true);
        }
        f(pre + "wo", b.wo, true);
        f(pre + "bn.gamma", b.bn.gamma, true);
        f(pre + "bn.beta", b.bn.beta, true);
        f(pre + "bn.mean", b.bn.mean, false);
        f(pre + "bn.var", b.bn.var, false);
        f(pre + "w1", b.w1, true);
        f(pre + "b1", b.b1, true);
    }
    f("head.bn.gamma", p.head_bn.gamma, true);
    f("head.bn.beta", p.head_bn.beta, true);
    f("head.bn.mean", p.head_bn.mean, false);
    f("head.bn.var", p.head_bn.var, false);
    f("head.w", p.wh, true);
    f("head.b", p.bh, true);
}

BatchNorm unit_bn(int d) {
    return {Mat::Ones(1, d), Mat::Zero(1, d), Mat::Zero(1, d), Mat::Ones(1, d)};
}

} // namespace

void VitParams::visit(const std::function<void(const std::string&, Mat&, bool)>& f) { visit_impl(*this, f); }

void VitParams::visit(const std::function<void(const std::string&, const Mat&, bool)>& f) const {
    visit_impl(*this, f);
}

VitParams zero_params(const VitConfig& cfg) {
    cfg.validate();
    const int D = cfg.latent_dim;
    const int d = cfg.head_dim();
    VitParams p;
    p.embed = Mat::Zero(cfg.patch_area(), D);
    p.pos = Mat::Zero(cfg.tokens(), D);
    p.cls = Mat::Zero(1, D);
    for (int l = 0; l < cfg.n_layers; ++l) {
        BlockParams b;
        for (int h = 0; h < cfg.n_heads; ++h) b.heads.push_back({Mat::Zero(D, d), Mat::Zero(D, d), Mat::Zero(D, d)});
        b.wo = Mat::Zero(cfg.literal_heads ? D : cfg.n_heads * d, D);
        b.bn = unit_bn(D);
        b.w1 = Mat::Zero(D, D);
        b.b1 = Mat::Zero(1, D);
        p.blocks.push_back(std::move(b));
    }
    p.head_bn = unit_bn(D);
    p.wh = Mat::Zero(D, cfg.n_classes);
    p.bh = Mat::Zero(1, cfg.n_classes);
    return p;
}

VitModel make_vit(const VitConfig& cfg) {
    VitModel m;
    m.config = cfg;
    m.params = zero_params(cfg);
    return m;
}

void init_vit(VitModel& model) {
    std::mt19937_64 rng(derive_seed(model.config.seed, {stream::kVitInit}));
    model.params.visit([&](const std::string& name, Mat& t, bool trainable) {
        if (!trainable) return;
        const auto ends = [&](std::string_view s) { return name.size() >= s.size() && name.ends_with(s); };
        if (ends("gamma") || ends("beta") || ends("b1") || name == "head.b") return;
        const bool embedding = name == "pos" || name == "cls";
        const double bound = 1.0 / std::sqrt(static_cast<double>(embedding ? t.cols() : t.rows()));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = u(rng);
    });
}

// ---------------------------------------------------------------------------
// Forward operators

Mat patchify(const IonImage& image, const VitConfig& cfg, double input_scale) {
    if (image.pixels.height != cfg.height || image.pixels.width != cfg.width) {
        throw ShapeError("image is " + std::to_string(image.pixels.height) + "x" + std::to_string(image.pixels.width) +
                         ", model expects " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
    }
    const int P = cfg.patch;
    const int per_row = cfg.width / P;
    Mat out(cfg.n_patches(), cfg.patch_area());
    for (int n = 0; n < cfg.n_patches(); ++n) {
        const int r0 = (n / per_row) * P;
        const int c0 = (n % per_row) * P;
        for (int r = 0; r < P; ++r)
            for (int c = 0; c < P; ++c) out(n, r * P + c) = image.pixels.at(r0 + r, c0 + c) * input_scale;
    }
    return out;
}

Mat embed(const Mat& patches, const VitParams& p) {
    if (patches.cols() != p.embed.rows() || patches.rows() + 1 != p.pos.rows())
        throw ShapeError("patch matrix does not match the embedding shapes");
    Mat z(patches.rows() + 1, p.embed.cols());
    z.row(0) = p.cls;
    z.bottomRows(patches.rows()) = patches * p.embed;
    z += p.pos;
    return z;
}

namespace {

void softmax_rows(Mat& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index c = 0; c < s.cols(); ++c) {
            s(r, c) = std::exp(s(r, c) - mx);
            sum += s(r, c);
        }
        s.row(r) /= sum;
    }
}

struct HeadCache {
    Mat q, k, v, a;
};

Mat attention(const Mat& z, const HeadParams& head, int d, HeadCache* cache) {
    Mat q = z * head.wq;
    Mat k = z * head.wk;
    Mat v = z * head.wv;
    Mat a = (q * k.transpose()) / std::sqrt(static_cast<double>(d));
    softmax_rows(a);
    Mat out = a * v;
    if (cache) *cache = {std::move(q), std::move(k), std::move(v), std::move(a)};
    return out;
}

Mat combine_heads(const Mat& z, const BlockParams& block, const VitConfig& cfg, std::vector<HeadCache>* caches) {
    const int d = cfg.head_dim();
    Mat o = Mat::Zero(z.rows(), block.wo.rows());
    if (caches) caches->resize(block.heads.size());
    for (std::size_t h = 0; h < block.heads.size(); ++h) {
        Mat sa = attention(z, block.heads[h], d, caches ? &(*caches)[h] : nullptr);
        if (cfg.literal_heads) o += sa;
        else o.middleCols(static_cast<Eigen::Index>(h) * d, d) = sa;
    }
    return o;
}

// Batch-norm over the rows of x. Train mode writes the batch statistics.
struct BnOut {
    Mat y, xhat, mean, var;
};

BnOut batch_norm(const Mat& x, const BatchNorm& bn, double eps, Mode mode) {
    BnOut o;
    if (mode == Mode::Train) {
        o.mean = x.colwise().mean();
        o.var = (x.rowwise() - o.mean.row(0)).array().square().colwise().mean().matrix();
    } else {
        o.mean = bn.mean;
        o.var = bn.var;
    }
    const Eigen::RowVectorXd inv = (o.var.array() + eps).rsqrt().matrix();
    o.xhat = ((x.rowwise() - o.mean.row(0)).array().rowwise() * inv.array()).matrix();
    o.y = ((o.xhat.array().rowwise() * bn.gamma.row(0).array()).rowwise() + bn.beta.row(0).array()).matrix();
    return o;
}

Mat batch_norm_backward(const Mat& dy, const BnOut& f, const BatchNorm& bn, double eps, Mode mode, Mat& dgamma,
                        Mat& dbeta) {
    dgamma += (dy.array() * f.xhat.array()).colwise().sum().matrix();
    dbeta += dy.colwise().sum();
    const Eigen::RowVectorXd scale = (bn.gamma.row(0).array() * (f.var.row(0).array() + eps).rsqrt()).matrix();
    if (mode == Mode::Infer) return (dy.array().rowwise() * scale.array()).matrix();
    const double m = static_cast<double>(dy.rows());
    const Eigen::RowVectorXd sum_dy = dy.colwise().sum();
    const Eigen::RowVectorXd sum_dy_xhat = (dy.array() * f.xhat.array()).colwise().sum().matrix();
    Mat dx = (dy * m).rowwise() - sum_dy;
    dx -= (f.xhat.array().rowwise() * sum_dy_xhat.array()).matrix();
    return ((dx.array().rowwise() * scale.array()) / m).matrix();
}

Mat stack(const std::vector<Mat>& parts) {
    const Eigen::Index T = parts.front().rows();
    Mat s(T * static_cast<Eigen::Index>(parts.size()), parts.front().cols());
    for (std::size_t b = 0; b < parts.size(); ++b) s.middleRows(static_cast<Eigen::Index>(b) * T, T) = parts[b];
    return s;
}

struct BlockCache {
    std::vector<Mat> zin;
    std::vector<std::vector<HeadCache>> heads;
    std::vector<Mat> ocat;
    BnOut bn;
    Mat l; // pre-ReLU linear output
};

std::vector<Mat> block_forward(const std::vector<Mat>& z, const BlockParams& block, const VitConfig& cfg, Mode mode,
                               BlockCache* cache) {
    const Eigen::Index T = z.front().rows();
    std::vector<Mat> m(z.size());
    if (cache) {
        cache->zin = z;
        cache->heads.resize(z.size());
        cache->ocat.resize(z.size());
    }
    for (std::size_t b = 0; b < z.size(); ++b) {
        Mat o = combine_heads(z[b], block, cfg, cache ? &cache->heads[b] : nullptr);
        m[b] = o * block.wo + z[b]; // MSA + s1
        if (cache) cache->ocat[b] = std::move(o);
    }
    const Mat u = stack(m);
    BnOut bn = batch_norm(u, block.bn, cfg.bn_eps, mode);
    Mat l = (bn.y * block.w1).rowwise() + block.b1.row(0);
    const Mat out = l.cwiseMax(0.0) + u; // + s2
    std::vector<Mat> res(z.size());
    for (std::size_t b = 0; b < z.size(); ++b) res[b] = out.middleRows(static_cast<Eigen::Index>(b) * T, T);
    if (cache) {
        cache->bn = std::move(bn);
        cache->l = std::move(l);
    }
    return res;
}

} // namespace

Mat self_attention(const Mat& z, const HeadParams& head, int head_dim) { return attention(z, head, head_dim, nullptr); }

Mat msa(const Mat& z, const BlockParams& block, const VitConfig& cfg) {
    return combine_heads(z, block, cfg, nullptr) * block.wo;
}

std::vector<Mat> transformer_block(const std::vector<Mat>& z, const BlockParams& block, const VitConfig& cfg,
                                   Mode mode) {
    if (z.empty()) throw ShapeError("transformer block needs at least one token matrix");
    return block_forward(z, block, cfg, mode, nullptr);
}

Mat transformer_block(const Mat& z, const BlockParams& block, const VitConfig& cfg, Mode mode) {
    return transformer_block(std::vector<Mat>{z}, block, cfg, mode).front();
}

Row classify_head(const Mat& cls_out, const VitParams& p, double eps) {
    const BnOut bn = batch_norm(cls_out, p.head_bn, eps, Mode::Infer);
    return ((bn.y * p.wh).rowwise() + p.bh.row(0)).row(0);
}

Row forward(const VitModel& model, const IonImage& image) {
    const auto& cfg = model.config;
    std::vector<Mat> z{embed(patchify(image, cfg, model.input_scale), model.params)};
    for (const auto& block : model.params.blocks) z = block_forward(z, block, cfg, Mode::Infer, nullptr);
    return classify_head(z.front().row(0), model.params, cfg.bn_eps);
}

QubitState predict(const VitModel& model, const IonImage& image) {
    const Row y = forward(model, image);
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < y.size(); ++c)
        if (y(c) > y(best)) best = c;
    int n_ions = 0;
    while ((1 << n_ions) < model.config.n_classes) ++n_ions;
    return QubitState(n_ions, static_cast<std::uint32_t>(best));
}

// ---------------------------------------------------------------------------
// Training

namespace {

BatchResult batch_pass(const VitModel& model, const std::vector<const Mat*>& patches, std::span<const int> labels,
                       Mode mode, VitParams* grad) {
    const auto& cfg = model.config;
    const auto& p = model.params;
    const std::size_t B = patches.size();
    const int d = cfg.head_dim();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<Mat> z(B);
    for (std::size_t b = 0; b < B; ++b) z[b] = embed(*patches[b], p);
    std::vector<BlockCache> caches(p.blocks.size());
    for (std::size_t l = 0; l < p.blocks.size(); ++l) z = block_forward(z, p.blocks[l], cfg, mode, &caches[l]);

    Mat cls(static_cast<Eigen::Index>(B), cfg.latent_dim);
    for (std::size_t b = 0; b < B; ++b) cls.row(static_cast<Eigen::Index>(b)) = z[b].row(0);
    const BnOut hb = batch_norm(cls, p.head_bn, cfg.bn_eps, mode);
    const Mat logits = (hb.y * p.wh).rowwise() + p.bh.row(0);

    BatchResult res;
    Mat probs = logits;
    softmax_rows(probs);
    for (std::size_t b = 0; b < B; ++b) {
        const auto row = static_cast<Eigen::Index>(b);
        res.loss -= std::log(std::max(probs(row, labels[b]), 1e-300));
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < logits.cols(); ++c)
            if (logits(row, c) > logits(row, best)) best = c;
        res.correct += best == labels[b];
    }
    res.loss /= static_cast<double>(B);
    for (const auto& c : caches) res.bn_stats.emplace_back(c.bn.mean, c.bn.var);
    res.bn_stats.emplace_back(hb.mean, hb.var);
    if (!grad) return res;

    *grad = zero_params(cfg);
    grad->visit([](const std::string&, Mat& t, bool) { t.setZero(); });
    auto& g = *grad;
    Mat dlogits = probs;
    for (std::size_t b = 0; b < B; ++b) dlogits(static_cast<Eigen::Index>(b), labels[b]) -= 1.0;
    dlogits /= static_cast<double>(B);
    g.wh = hb.y.transpose() * dlogits;
    g.bh = dlogits.colwise().sum();
    const Mat dcls = batch_norm_backward(dlogits * p.wh.transpose(), hb, p.head_bn, cfg.bn_eps, mode,
                                         g.head_bn.gamma, g.head_bn.beta);

    const Eigen::Index T = cfg.tokens();
    std::vector<Mat> dz(B, Mat::Zero(T, cfg.latent_dim));
    for (std::size_t b = 0; b < B; ++b) dz[b].row(0) = dcls.row(static_cast<Eigen::Index>(b));

    for (std::size_t l = p.blocks.size(); l-- > 0;) {
        const auto& blk = p.blocks[l];
        const auto& c = caches[l];
        auto& gb = g.blocks[l];
        const Mat dout = stack(dz);
        // out = ReLU(L) + U
        const Mat dl = (dout.array() * (c.l.array() > 0.0).cast<double>()).matrix();
        gb.w1 = c.bn.y.transpose() * dl;
        gb.b1 = dl.colwise().sum();
        Mat du = dout + batch_norm_backward(dl * blk.w1.transpose(), c.bn, blk.bn, cfg.bn_eps, mode, gb.bn.gamma,
                                            gb.bn.beta);
        // U = O W_O + Z
        for (std::size_t b = 0; b < B; ++b) {
            const Mat dub = du.middleRows(static_cast<Eigen::Index>(b) * T, T);
            const Mat& zin = c.zin[b];
            gb.wo += c.ocat[b].transpose() * dub;
            const Mat docat = dub * blk.wo.transpose();
            Mat dzin = dub;
            for (std::size_t h = 0; h < blk.heads.size(); ++h) {
                const auto& hc = c.heads[b][h];
                const Mat dsa = cfg.literal_heads ? docat : Mat(docat.middleCols(static_cast<Eigen::Index>(h) * d, d));
                const Mat da = dsa * hc.v.transpose();
                const Mat dv = hc.a.transpose() * dsa;
                Mat ds = hc.a.array() * (da.array().colwise() - (da.array() * hc.a.array()).rowwise().sum());
                ds *= inv_sqrt_d;
                const Mat dq = ds * hc.k;
                const Mat dk = ds.transpose() * hc.q;
                auto& gh = gb.heads[h];
                gh.wq += zin.transpose() * dq;
                gh.wk += zin.transpose() * dk;
                gh.wv += zin.transpose() * dv;
                dzin += dq * blk.heads[h].wq.transpose() + dk * blk.heads[h].wk.transpose() +
                        dv * blk.heads[h].wv.transpose();
            }
            dz[b] = std::move(dzin);
        }
    }
    for (std::size_t b = 0; b < B; ++b) {
        g.cls += dz[b].row(0);
        g.pos += dz[b];
        g.embed += patches[b]->transpose() * dz[b].bottomRows(T - 1);
    }
    return res;
}

std::vector<int> labels_of(std::span<const IonImage> images) {
    std::vector<int> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(static_cast<int>(img.label.bits));
    return out;
}

} // namespace

BatchResult loss_and_gradient(const VitModel& model, std::span<const IonImage> batch, Mode mode, VitParams* grad) {
    if (batch.empty()) throw UsageError("loss over an empty batch");
    std::vector<Mat> patches;
    patches.reserve(batch.size());
    for (const auto& img : batch) {
        if (static_cast<int>(img.label.bits) >= model.config.n_classes) throw LabelingError("label outside the class range");
        patches.push_back(patchify(img, model.config, model.input_scale));
    }
    std::vector<const Mat*> ptrs;
    for (const auto& m : patches) ptrs.push_back(&m);
    const auto labels = labels_of(batch);
    return batch_pass(model, ptrs, labels, mode, grad);
}

VitModel train_vit(const VitConfig& cfg, std::span<const IonImage> train_images, TrainLog* log) {
    cfg.validate();
    if (train_images.empty()) throw UsageError("training set is empty");
    VitModel model = make_vit(cfg);
    std::uint16_t max_pixel = 0;
    for (const auto& img : train_images) {
        if (static_cast<int>(img.label.bits) >= cfg.n_classes) throw LabelingError("label outside the class range");
        for (auto v : img.pixels.data) max_pixel = std::max(max_pixel, v);
    }
    model.input_scale = max_pixel > 0 ? 1.0 / max_pixel : 1.0;
    init_vit(model);

    std::vector<Mat> patches;
    patches.reserve(train_images.size());
    for (const auto& img : train_images) patches.push_back(patchify(img, cfg, model.input_scale));
    const auto labels = labels_of(train_images);

    VitParams velocity = zero_params(cfg);
    VitParams grad;
    std::vector<std::size_t> order(train_images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(cfg.seed, {stream::kVitShuffle, static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        double total_loss = 0.0;
        std::size_t correct = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
            const std::size_t b1 = std::min(order.size(), b0 + bs);
            std::vector<const Mat*> batch;
            std::vector<int> batch_labels;
            for (std::size_t i = b0; i < b1; ++i) {
                batch.push_back(&patches[order[i]]);
                batch_labels.push_back(labels[order[i]]);
            }
            const auto res = batch_pass(model, batch, batch_labels, Mode::Train, &grad);
            if (!std::isfinite(res.loss)) throw TrainingError("ViT training loss is not finite", epoch);
            total_loss += res.loss * static_cast<double>(b1 - b0);
            correct += res.correct;

            std::vector<Mat*> vel;
            velocity.visit([&](const std::string&, Mat& t, bool) { vel.push_back(&t); });
            std::vector<Mat*> gr;
            grad.visit([&](const std::string&, Mat& t, bool) { gr.push_back(&t); });
            std::size_t k = 0;
            model.params.visit([&](const std::string&, Mat& t, bool trainable) {
                if (trainable) {
                    *vel[k] = cfg.momentum * *vel[k] + *gr[k];
                    t -= cfg.learning_rate * *vel[k];
                }
                ++k;
            });

            // Running statistics, with the unbiased variance estimate.
            const double m_tokens = static_cast<double>((b1 - b0) * static_cast<std::size_t>(cfg.tokens()));
            const double m_cls = static_cast<double>(b1 - b0);
            const double mom = cfg.bn_momentum;
            for (std::size_t l = 0; l < model.params.blocks.size(); ++l) {
                auto& bn = model.params.blocks[l].bn;
                const double unbias = m_tokens > 1 ? m_tokens / (m_tokens - 1) : 1.0;
                bn.mean = (1 - mom) * bn.mean + mom * res.bn_stats[l].first;
                bn.var = (1 - mom) * bn.var + mom * unbias * res.bn_stats[l].second;
            }
            auto& hb = model.params.head_bn;
            const double unbias = m_cls > 1 ? m_cls / (m_cls - 1) : 1.0;
            hb.mean = (1 - mom) * hb.mean + mom * res.bn_stats.back().first;
            hb.var = (1 - mom) * hb.var + mom * unbias * res.bn_stats.back().second;
        }
        if (log) {
            log->epoch_loss.push_back(total_loss / static_cast<double>(order.size()));
            log->epoch_train_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(order.size()));
        }
    }

    // The moving averages trail the final weights; replace them with the
    // statistics of one train-mode pass over (a prefix of) the training set,
    // so infer mode normalizes exactly as that pass did.
    const std::size_t n_stats = std::min<std::size_t>(patches.size(), kBnRecalibrationImages);
    std::vector<const Mat*> all;
    for (std::size_t i = 0; i < n_stats; ++i) all.push_back(&patches[i]);
    const auto res = batch_pass(model, all, std::span<const int>(labels).first(n_stats), Mode::Train, nullptr);
    for (std::size_t l = 0; l < model.params.blocks.size(); ++l) {
        model.params.blocks[l].bn.mean = res.bn_stats[l].first;
        model.params.blocks[l].bn.var = res.bn_stats[l].second;
    }
    model.params.head_bn.mean = res.bn_stats.back().first;
    model.params.head_bn.var = res.bn_stats.back().second;
    return model;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

void write_config(io::ByteWriter& w, const VitConfig& c) {
    w.u16(static_cast<std::uint16_t>(c.height));
    w.u16(static_cast<std::uint16_t>(c.width));
    w.u8(static_cast<std::uint8_t>(c.patch));
    w.u16(static_cast<std::uint16_t>(c.latent_dim));
    w.u8(static_cast<std::uint8_t>(c.n_heads));
    w.u8(static_cast<std::uint8_t>(c.n_layers));
    w.u16(static_cast<std::uint16_t>(c.n_classes));
    w.u8(c.literal_heads ? 1 : 0);
    w.f64(c.learning_rate);
    w.f64(c.momentum);
    w.u32(static_cast<std::uint32_t>(c.batch_size));
    w.u32(static_cast<std::uint32_t>(c.epochs));
    w.u64(c.seed);
    w.f64(c.bn_eps);
    w.f64(c.bn_momentum);
}

VitConfig read_config(io::ByteReader& r) {
    VitConfig c;
    c.height = r.u16();
    c.width = r.u16();
    c.patch = r.u8();
    c.latent_dim = r.u16();
    c.n_heads = r.u8();
    c.n_layers = r.u8();
    c.n_classes = r.u16();
    c.literal_heads = r.u8() != 0;
    c.learning_rate = r.f64();
    c.momentum = r.f64();
    c.batch_size = static_cast<int>(r.u32());
    c.epochs = static_cast<int>(r.u32());
    c.seed = r.u64();
    c.bn_eps = r.f64();
    c.bn_momentum = r.f64();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ParseError(ParseErrorKind::Malformed, r.context() + ": " + e.what());
    }
    return c;
}

} // namespace detail

namespace {
constexpr std::uint8_t kFloatKind = 0;
}

std::vector<std::uint8_t> serialize_vit(const VitModel& model) {
    io::ByteWriter w;
    w.magic("QVIT");
    w.u16(kVitVersion);
    w.u8(kFloatKind);
    detail::write_config(w, model.config);
    w.f64(model.input_scale);
    model.params.visit([&](const std::string&, const Mat& t, bool) {
        w.u32(static_cast<std::uint32_t>(t.rows()));
        w.u32(static_cast<std::uint32_t>(t.cols()));
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) w.f64(t(r, c));
    });
    return w.take();
}

VitModel deserialize_vit(std::span<const std::uint8_t> bytes, const std::string& context) {
    io::ByteReader r(bytes, context);
    r.expect_magic("QVIT");
    r.expect_version(kVitVersion);
    if (r.u8() != kFloatKind) throw ParseError(ParseErrorKind::Malformed, context + ": not a float ViT model");
    VitModel m = make_vit(detail::read_config(r));
    m.input_scale = r.f64();
    m.params.visit([&](const std::string& name, Mat& t, bool) {
        const auto rows = r.u32();
        const auto cols = r.u32();
        if (rows != t.rows() || cols != t.cols())
            throw ParseError(ParseErrorKind::Malformed, context + ": tensor " + name + " has the wrong shape");
        r.require(static_cast<std::size_t>(rows) * cols * 8, name);
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = r.f64();
    });
    r.expect_end();
    return m;
}

void save_vit(const VitModel& model, const std::filesystem::path& path) { io::write_file(path, serialize_vit(model)); }

VitModel load_vit(const std::filesystem::path& path) { return deserialize_vit(io::read_file(path), path.string()); }

} // namespace qdetect::vit
