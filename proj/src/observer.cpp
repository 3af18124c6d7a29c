#include "obsprobe/observer.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "obsprobe/text.hpp"

namespace obsprobe::observer {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config / weights plumbing
// ---------------------------------------------------------------------------

std::string ModelConfig::to_json() const {
    json j;
    j["model_id"] = model_id;
    j["n_layer"] = n_layer;
    j["n_head"] = n_head;
    j["n_embd"] = n_embd;
    j["n_ctx"] = n_ctx;
    j["vocab_size"] = vocab_size;
    j["ln_eps"] = ln_eps;
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig c;
    c.model_id = j.at("model_id").get<std::string>();
    c.n_layer = j.at("n_layer").get<int>();
    c.n_head = j.at("n_head").get<int>();
    c.n_embd = j.at("n_embd").get<int>();
    c.n_ctx = j.at("n_ctx").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.ln_eps = j.value("ln_eps", 1e-5);
    if (c.n_layer <= 0 || c.n_head <= 0 || c.n_embd <= 0 || c.n_ctx <= 0 || c.vocab_size <= 0) {
        throw RuntimeError("model config: non-positive dimension");
    }
    if (c.n_embd % c.n_head != 0) throw RuntimeError("model config: n_embd % n_head != 0");
    return c;
}

Weights Weights::zeros_like(const ModelConfig& cfg) {
    Weights w;
    w.wte = Mat::Zero(cfg.vocab_size, cfg.n_embd);
    w.wpe = Mat::Zero(cfg.n_ctx, cfg.n_embd);
    w.blocks.resize(static_cast<size_t>(cfg.n_layer));
    for (auto& b : w.blocks) {
        int d = cfg.n_embd;
        b.ln1_g = Vec::Zero(d);
        b.ln1_b = Vec::Zero(d);
        b.ln2_g = Vec::Zero(d);
        b.ln2_b = Vec::Zero(d);
        b.attn_qkv_w = Mat::Zero(d, 3 * d);
        b.attn_qkv_b = Vec::Zero(3 * d);
        b.attn_proj_w = Mat::Zero(d, d);
        b.attn_proj_b = Vec::Zero(d);
        b.mlp_fc_w = Mat::Zero(d, 4 * d);
        b.mlp_fc_b = Vec::Zero(4 * d);
        b.mlp_proj_w = Mat::Zero(4 * d, d);
        b.mlp_proj_b = Vec::Zero(d);
    }
    w.lnf_g = Vec::Zero(cfg.n_embd);
    w.lnf_b = Vec::Zero(cfg.n_embd);
    return w;
}

std::vector<TensorView> tensor_views(Weights& w) {
    std::vector<TensorView> out;
    auto mat = [&out](const std::string& name, Mat& m) {
        out.push_back({name, m.data(), static_cast<size_t>(m.rows()), static_cast<size_t>(m.cols())});
    };
    auto vec = [&out](const std::string& name, Vec& v) {
        out.push_back({name, v.data(), static_cast<size_t>(v.size()), 1});
    };
    mat("wte.weight", w.wte);
    mat("wpe.weight", w.wpe);
    for (size_t i = 0; i < w.blocks.size(); ++i) {
        const std::string p = "h." + std::to_string(i) + ".";
        auto& b = w.blocks[i];
        vec(p + "ln_1.weight", b.ln1_g);
        vec(p + "ln_1.bias", b.ln1_b);
        mat(p + "attn.c_attn.weight", b.attn_qkv_w);
        vec(p + "attn.c_attn.bias", b.attn_qkv_b);
        mat(p + "attn.c_proj.weight", b.attn_proj_w);
        vec(p + "attn.c_proj.bias", b.attn_proj_b);
        vec(p + "ln_2.weight", b.ln2_g);
        vec(p + "ln_2.bias", b.ln2_b);
        mat(p + "mlp.c_fc.weight", b.mlp_fc_w);
        vec(p + "mlp.c_fc.bias", b.mlp_fc_b);
        mat(p + "mlp.c_proj.weight", b.mlp_proj_w);
        vec(p + "mlp.c_proj.bias", b.mlp_proj_b);
    }
    vec("ln_f.weight", w.lnf_g);
    vec("ln_f.bias", w.lnf_b);
    return out;
}

void Weights::add_scaled(const Weights& other, double scale) {
    auto a = tensor_views(*this);
    auto b = tensor_views(const_cast<Weights&>(other));
    for (size_t i = 0; i < a.size(); ++i) {
        Eigen::Map<Vec>(a[i].data, static_cast<Eigen::Index>(a[i].size())) +=
            scale * Eigen::Map<const Vec>(b[i].data, static_cast<Eigen::Index>(b[i].size()));
    }
}

void Weights::set_zero() {
    for (auto& v : tensor_views(*this)) {
        Eigen::Map<Vec>(v.data, static_cast<Eigen::Index>(v.size())).setZero();
    }
}

double Weights::sq_norm() const {
    double s = 0.0;
    for (auto& v : tensor_views(const_cast<Weights&>(*this))) {
        s += Eigen::Map<const Vec>(v.data, static_cast<Eigen::Index>(v.size())).squaredNorm();
    }
    return s;
}

void CaptureSpec::validate(int n_layer) const {
    bool any = !layers.empty() || capture_attention || capture_head_outputs ||
               capture_mlp_outputs || capture_logits;
    if (!any) throw RuntimeError("capture spec: nothing requested");
    for (int l : layers) {
        if (l < 0 || l > n_layer) {
            throw RuntimeError("capture spec: layer " + std::to_string(l) + " outside [0, " +
                               std::to_string(n_layer) + "]");
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg, Weights w) : cfg_(std::move(cfg)), w_(std::move(w)) {}

Model Model::load(const fs::path& dir) {
    ModelConfig cfg = ModelConfig::from_json(read_text_file(dir / "config.json"));
    Weights w = Weights::zeros_like(cfg);
    json manifest = json::parse(read_text_file(dir / "manifest.json"));
    const json& tensors = manifest.at("tensors");
    for (auto& view : tensor_views(w)) {
        if (!tensors.contains(view.name)) {
            throw RuntimeError("checkpoint missing tensor: " + view.name);
        }
        const json& entry = tensors.at(view.name);
        auto shape = entry.at("shape").get<std::vector<size_t>>();
        size_t expected = 1;
        for (size_t s : shape) expected *= s;
        if (expected != view.size()) {
            throw RuntimeError("checkpoint shape mismatch for " + view.name);
        }
        fs::path file = dir / entry.at("file").get<std::string>();
        std::vector<float> raw = read_f32_file(file);
        if (raw.size() != view.size()) {
            throw RuntimeError("checkpoint size mismatch for " + view.name + " in " +
                               file.string());
        }
        uint64_t sum = fnv1a64(raw.data(), raw.size() * sizeof(float));
        if (hex64(sum) != entry.at("fnv64").get<std::string>()) {
            throw RuntimeError("checkpoint checksum mismatch for " + view.name);
        }
        for (size_t i = 0; i < raw.size(); ++i) view.data[i] = static_cast<double>(raw[i]);
    }
    return Model(std::move(cfg), std::move(w));
}

void Model::save(const fs::path& dir) const {
    fs::create_directories(dir);
    write_text_file(dir / "config.json", cfg_.to_json());
    json tensors = json::object();
    for (auto& view : tensor_views(const_cast<Weights&>(w_))) {
        std::vector<float> raw(view.size());
        for (size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(view.data[i]);
        std::string file = view.name + ".bin";
        write_f32_file(dir / file, raw.data(), raw.size());
        json entry;
        entry["file"] = file;
        entry["shape"] = view.cols == 1 ? std::vector<size_t>{view.rows}
                                        : std::vector<size_t>{view.rows, view.cols};
        entry["fnv64"] = hex64(fnv1a64(raw.data(), raw.size() * sizeof(float)));
        tensors[view.name] = entry;
    }
    json manifest;
    manifest["model_id"] = cfg_.model_id;
    manifest["dtype"] = "f32";
    manifest["tensors"] = tensors;
    write_text_file(dir / "manifest.json", manifest.dump(2));
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

namespace {

struct LnCache {
    Mat xhat;     // [T, d]
    Vec invstd;   // [T]
};

// y = g .* xhat + b per row
Mat layer_norm(const Mat& x, const Vec& g, const Vec& b, double eps, LnCache* cache) {
    const Eigen::Index T = x.rows(), d = x.cols();
    Mat y(T, d);
    Mat xhat(T, d);
    Vec invstd(T);
    for (Eigen::Index t = 0; t < T; ++t) {
        double mu = x.row(t).mean();
        double var = (x.row(t).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        xhat.row(t) = (x.row(t).array() - mu) * is;
        invstd(t) = is;
        y.row(t) = xhat.row(t).cwiseProduct(g.transpose()) + b.transpose();
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->invstd = std::move(invstd);
    }
    return y;
}

// Given dL/dy, returns dL/dx; accumulates dg/db if provided.
Mat layer_norm_backward(const Mat& dy, const LnCache& c, const Vec& g, Vec* dg, Vec* db) {
    const Eigen::Index T = dy.rows(), d = dy.cols();
    Mat dx(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
        Eigen::RowVectorXd dxhat = dy.row(t).cwiseProduct(g.transpose());
        double m1 = dxhat.mean();
        double m2 = dxhat.cwiseProduct(c.xhat.row(t)).mean();
        dx.row(t) = c.invstd(t) * (dxhat.array() - m1 - c.xhat.row(t).array() * m2);
    }
    if (dg) {
        for (Eigen::Index t = 0; t < T; ++t) {
            *dg += dy.row(t).cwiseProduct(c.xhat.row(t)).transpose();
            *db += dy.row(t).transpose();
        }
    }
    return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// gelu_new(x) = 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
Mat gelu(const Mat& x) {
    return 0.5 * x.array() * (1.0 + ((x.array() + 0.044715 * x.array().cube()) * kGeluC).tanh());
}

Mat gelu_backward(const Mat& x, const Mat& dy) {
    auto inner = (x.array() + 0.044715 * x.array().cube()) * kGeluC;
    auto th = inner.tanh();
    auto sech2 = 1.0 - th.square();
    auto dinner = kGeluC * (1.0 + 3.0 * 0.044715 * x.array().square());
    auto dgelu = 0.5 * (1.0 + th) + 0.5 * x.array() * sech2 * dinner;
    return (dy.array() * dgelu).matrix();
}

struct BlockTrace {
    Mat x_in;   // residual entering the block
    LnCache ln1;
    Mat a;      // ln1 output
    Mat qkv;    // [T, 3d]
    std::vector<Mat> P;  // per-head attention [T, T]
    Mat zcat;   // pre-projection attention output [T, d]
    Mat x_mid;
    LnCache ln2;
    Mat bmat;   // ln2 output
    Mat f;      // pre-gelu
    Mat u;      // post-gelu
};

struct Trace {
    std::vector<BlockTrace> blocks;
    Mat x_final;  // residual leaving the last block
};

}  // namespace

namespace {

void apply_hooks(Mat& x, int stream_key, const std::vector<ResidHook>& hooks) {
    for (const auto& h : hooks) {
        if (h.layer != stream_key) continue;
        if (h.row >= 0) {
            if (h.row >= x.rows()) {
                throw RuntimeError("resid hook row out of range: " + std::to_string(h.row));
            }
            h.fn(x.row(h.row));
        } else {
            for (Eigen::Index t = 0; t < x.rows(); ++t) h.fn(x.row(t));
        }
    }
}

}  // namespace

// Shared forward core. `trace` non-null keeps every intermediate for a later
// backward pass; `capture`/`spec` fill the requested capture tensors.
static void forward_core(const ModelConfig& cfg, const Weights& w, const std::vector<int>& tokens,
                         const std::vector<ResidHook>& hooks, const MlpScale& mlp_scale,
                         Trace* trace, CapturedActivations* capture, const CaptureSpec* spec) {
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.n_embd;
    const int H = cfg.n_head;
    const int dh = cfg.head_dim();
    if (T == 0) throw RuntimeError("forward: empty token sequence");
    if (T > cfg.n_ctx) {
        throw RuntimeError("forward: sequence length " + std::to_string(T) +
                           " exceeds context limit " + std::to_string(cfg.n_ctx));
    }
    for (int id : tokens) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw RuntimeError("forward: token id out of range: " + std::to_string(id));
        }
    }

    auto want_resid = [&](int key) {
        return capture && spec &&
               std::find(spec->layers.begin(), spec->layers.end(), key) != spec->layers.end();
    };

    Mat x(T, d);
    for (int t = 0; t < T; ++t) {
        x.row(t) = w.wte.row(tokens[static_cast<size_t>(t)]) + w.wpe.row(t);
    }
    apply_hooks(x, 0, hooks);
    if (want_resid(0)) capture->resid[0] = x;
    if (trace) trace->blocks.resize(static_cast<size_t>(cfg.n_layer));

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int b = 0; b < cfg.n_layer; ++b) {
        const BlockWeights& bw = w.blocks[static_cast<size_t>(b)];
        BlockTrace* bt = trace ? &trace->blocks[static_cast<size_t>(b)] : nullptr;
        if (bt) bt->x_in = x;

        LnCache ln1;
        Mat a = layer_norm(x, bw.ln1_g, bw.ln1_b, cfg.ln_eps, &ln1);
        Mat qkv = (a * bw.attn_qkv_w).rowwise() + bw.attn_qkv_b.transpose();

        Mat zcat(T, d);
        std::vector<Mat> probs;
        bool keep_probs = bt || (capture && spec && spec->capture_attention);
        if (keep_probs) probs.reserve(static_cast<size_t>(H));
        for (int h = 0; h < H; ++h) {
            auto q = qkv.middleCols(h * dh, dh);
            auto k = qkv.middleCols(d + h * dh, dh);
            auto v = qkv.middleCols(2 * d + h * dh, dh);
            Mat P = Mat::Zero(T, T);
            for (int t = 0; t < T; ++t) {
                Eigen::RowVectorXd logits = (q.row(t) * k.topRows(t + 1).transpose()) * scale;
                double mx = logits.maxCoeff();
                Eigen::ArrayXd e = (logits.array() - mx).exp();
                P.row(t).head(t + 1) = (e / e.sum()).matrix();
            }
            zcat.middleCols(h * dh, dh) = P * v;
            if (keep_probs) probs.push_back(std::move(P));
        }
        if (capture && spec && spec->capture_attention) capture->attn[b] = probs;
        if (capture && spec && spec->capture_head_outputs) {
            // per-head contribution after the output projection (bias excluded)
            for (int h = 0; h < H; ++h) {
                capture->head_out[{b, h}] =
                    zcat.middleCols(h * dh, dh) * bw.attn_proj_w.middleRows(h * dh, dh);
            }
        }

        Mat attn_out = (zcat * bw.attn_proj_w).rowwise() + bw.attn_proj_b.transpose();
        Mat x_mid = x + attn_out;

        LnCache ln2;
        Mat bmat = layer_norm(x_mid, bw.ln2_g, bw.ln2_b, cfg.ln_eps, &ln2);
        Mat f = (bmat * bw.mlp_fc_w).rowwise() + bw.mlp_fc_b.transpose();
        Mat u = gelu(f);
        Mat m = (u * bw.mlp_proj_w).rowwise() + bw.mlp_proj_b.transpose();
        if (mlp_scale.block == b) m *= (1.0 + mlp_scale.delta);
        if (capture && spec && spec->capture_mlp_outputs) capture->mlp_out[b] = m;

        x = x_mid + m;
        apply_hooks(x, b + 1, hooks);
        if (want_resid(b + 1)) capture->resid[b + 1] = x;

        if (bt) {
            bt->ln1 = std::move(ln1);
            bt->a = std::move(a);
            bt->qkv = std::move(qkv);
            bt->P = std::move(probs);
            bt->zcat = std::move(zcat);
            bt->x_mid = std::move(x_mid);
            bt->ln2 = std::move(ln2);
            bt->bmat = std::move(bmat);
            bt->f = std::move(f);
            bt->u = std::move(u);
        }
    }
    if (trace) trace->x_final = x;
    if (capture) capture->T = T;
    if (capture && spec && spec->capture_logits) {
        Mat fin = layer_norm(x, w.lnf_g, w.lnf_b, cfg.ln_eps, nullptr);
        capture->logits = fin * w.wte.transpose();
    }
}

CapturedActivations Model::forward(const std::vector<int>& tokens, const CaptureSpec& spec,
                                   const std::vector<ResidHook>& hooks,
                                   const MlpScale& mlp_scale) const {
    spec.validate(cfg_.n_layer);
    CapturedActivations acts;
    forward_core(cfg_, w_, tokens, hooks, mlp_scale, nullptr, &acts, &spec);
    return acts;
}

// ---------------------------------------------------------------------------
// Backward pass through one block (activations only; weight grads optional)
// ---------------------------------------------------------------------------

namespace {

// Given dL/d(resid leaving block b), returns dL/d(resid entering block b).
Mat block_backward(const ModelConfig& cfg, const BlockWeights& bw, const BlockTrace& bt,
                   const Mat& dx_out, double mlp_gain, BlockWeights* gw) {
    const int T = static_cast<int>(dx_out.rows());
    const int d = cfg.n_embd;
    const int H = cfg.n_head;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // MLP branch: x_out = x_mid + gain * (gelu(ln2(x_mid) Wfc + bfc) Wproj + bproj)
    Mat dm = mlp_gain * dx_out;
    Mat du = dm * bw.mlp_proj_w.transpose();
    if (gw) {
        gw->mlp_proj_w += bt.u.transpose() * dm;
        gw->mlp_proj_b += dm.colwise().sum().transpose();
    }
    Mat df = gelu_backward(bt.f, du);
    Mat dbmat = df * bw.mlp_fc_w.transpose();
    if (gw) {
        gw->mlp_fc_w += bt.bmat.transpose() * df;
        gw->mlp_fc_b += df.colwise().sum().transpose();
    }
    Mat dx_mid = dx_out + layer_norm_backward(dbmat, bt.ln2, bw.ln2_g, gw ? &gw->ln2_g : nullptr,
                                              gw ? &gw->ln2_b : nullptr);

    // Attention branch: x_mid = x_in + (zcat Wproj + bproj)
    Mat dzcat = dx_mid * bw.attn_proj_w.transpose();
    if (gw) {
        gw->attn_proj_w += bt.zcat.transpose() * dx_mid;
        gw->attn_proj_b += dx_mid.colwise().sum().transpose();
    }
    Mat dqkv = Mat::Zero(T, 3 * d);
    for (int h = 0; h < H; ++h) {
        auto q = bt.qkv.middleCols(h * dh, dh);
        auto k = bt.qkv.middleCols(d + h * dh, dh);
        auto v = bt.qkv.middleCols(2 * d + h * dh, dh);
        const Mat& P = bt.P[static_cast<size_t>(h)];
        auto dz = dzcat.middleCols(h * dh, dh);
        Mat dP = dz * v.transpose();
        dqkv.middleCols(2 * d + h * dh, dh) += P.transpose() * dz;
        // softmax backward, rows are independent; masked entries have P = 0
        Mat dS(T, T);
        for (int t = 0; t < T; ++t) {
            double dot = dP.row(t).cwiseProduct(P.row(t)).sum();
            dS.row(t) = P.row(t).array() * (dP.row(t).array() - dot);
        }
        dqkv.middleCols(h * dh, dh) += (dS * k) * scale;
        dqkv.middleCols(d + h * dh, dh) += (dS.transpose() * q) * scale;
    }
    Mat da = dqkv * bw.attn_qkv_w.transpose();
    if (gw) {
        gw->attn_qkv_w += bt.a.transpose() * dqkv;
        gw->attn_qkv_b += dqkv.colwise().sum().transpose();
    }
    return dx_mid + layer_norm_backward(da, bt.ln1, bw.ln1_g, gw ? &gw->ln1_g : nullptr,
                                        gw ? &gw->ln1_b : nullptr);
}

}  // namespace

GradientResult Model::score_gradients(const std::vector<int>& tokens, int layer, int t_star,
                                      const Vec& w, double b, const CaptureSpec& spec,
                                      const MlpScale& mlp_scale) const {
    if (layer < 0 || layer > cfg_.n_layer) {
        throw RuntimeError("score_gradients: layer " + std::to_string(layer) + " outside [0, " +
                           std::to_string(cfg_.n_layer) + "]");
    }
    if (w.size() != cfg_.n_embd) throw RuntimeError("score_gradients: weight dimension mismatch");
    const int T = static_cast<int>(tokens.size());
    if (t_star < 0 || t_star >= T) throw RuntimeError("score_gradients: t_star out of range");

    GradientResult res;
    Trace trace;
    forward_core(cfg_, w_, tokens, {}, mlp_scale, &trace, &res.acts, &spec);

    // stream k is the input of block k for k < L, and x_final for k = L
    const Mat& r_star = layer == cfg_.n_layer ? trace.x_final
                                              : trace.blocks[static_cast<size_t>(layer)].x_in;
    res.score = w.dot(r_star.row(t_star).transpose()) + b;

    Mat dX = Mat::Zero(T, cfg_.n_embd);
    dX.row(t_star) = w.transpose();
    res.resid_grads[layer] = dX;
    for (int blk = layer - 1; blk >= 0; --blk) {
        double gain = (mlp_scale.block == blk) ? 1.0 + mlp_scale.delta : 1.0;
        dX = block_backward(cfg_, w_.blocks[static_cast<size_t>(blk)],
                            trace.blocks[static_cast<size_t>(blk)], dX, gain, nullptr);
        res.resid_grads[blk] = dX;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Language-model loss (for adaptation)
// ---------------------------------------------------------------------------

double Model::lm_loss(const std::vector<int>& tokens, Weights* grads, double grad_scale) const {
    const int T = static_cast<int>(tokens.size());
    if (T < 2) throw RuntimeError("lm_loss: need at least 2 tokens");
    Trace trace;
    forward_core(cfg_, w_, tokens, {}, {}, &trace, nullptr, nullptr);

    LnCache lnf;
    Mat fin = layer_norm(trace.x_final, w_.lnf_g, w_.lnf_b, cfg_.ln_eps, &lnf);
    Mat logits = fin * w_.wte.transpose();  // [T, V]

    const int P = T - 1;  // predicted positions
    double loss = 0.0;
    Mat dlogits;
    if (grads) dlogits = Mat::Zero(T, cfg_.vocab_size);
    for (int t = 0; t < P; ++t) {
        int target = tokens[static_cast<size_t>(t) + 1];
        double mx = logits.row(t).maxCoeff();
        Eigen::ArrayXd e = (logits.row(t).array() - mx).exp();
        double Z = e.sum();
        loss += -(logits(t, target) - mx - std::log(Z));
        if (grads) {
            dlogits.row(t) = (e / Z).matrix() * (grad_scale / P);
            dlogits(t, target) -= grad_scale / P;
        }
    }
    loss /= P;
    if (!grads) return loss;

    Mat dfin = dlogits * w_.wte;
    grads->wte += dlogits.transpose() * fin;  // tied unembedding
    Mat dx = layer_norm_backward(dfin, lnf, w_.lnf_g, &grads->lnf_g, &grads->lnf_b);
    for (int blk = cfg_.n_layer - 1; blk >= 0; --blk) {
        dx = block_backward(cfg_, w_.blocks[static_cast<size_t>(blk)],
                            trace.blocks[static_cast<size_t>(blk)], dx, 1.0,
                            &grads->blocks[static_cast<size_t>(blk)]);
    }
    for (int t = 0; t < T; ++t) {
        grads->wte.row(tokens[static_cast<size_t>(t)]) += dx.row(t);
        grads->wpe.row(t) += dx.row(t);
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Greedy generation with a KV cache
// ---------------------------------------------------------------------------

namespace {

struct KvCache {
    // per block, keys/values for all heads packed as [t, d]
    std::vector<Mat> K, V;
};

}  // namespace

std::vector<int> Model::generate_greedy(const std::vector<int>& prompt, int max_new_tokens,
                                        const std::vector<ResidHook>& hooks, int eot_id) const {
    if (prompt.empty()) throw RuntimeError("generate: empty prompt");
    const int d = cfg_.n_embd;
    const int H = cfg_.n_head;
    const int dh = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    KvCache cache;
    cache.K.assign(static_cast<size_t>(cfg_.n_layer), Mat());
    cache.V.assign(static_cast<size_t>(cfg_.n_layer), Mat());

    std::vector<int> out = prompt;
    // row >= 0 hooks fire when that absolute position is computed (once, since
    // the KV cache never recomputes a position); row == -1 hooks fire on the
    // last row of every pass, i.e. on each next-token computation.
    auto run_rows = [&](const std::vector<int>& toks, int pos0) -> Mat {
        const int n = static_cast<int>(toks.size());
        Mat x(n, d);
        for (int i = 0; i < n; ++i) {
            x.row(i) = w_.wte.row(toks[static_cast<size_t>(i)]) + w_.wpe.row(pos0 + i);
        }
        auto fire = [&](int stream_key, Mat& rows) {
            for (const auto& h : hooks) {
                if (h.layer != stream_key) continue;
                if (h.row >= pos0 && h.row < pos0 + n) h.fn(rows.row(h.row - pos0));
                if (h.row == -1) h.fn(rows.row(n - 1));
            }
        };
        fire(0, x);
        for (int b = 0; b < cfg_.n_layer; ++b) {
            const BlockWeights& bw = w_.blocks[static_cast<size_t>(b)];
            LnCache ln1;
            Mat a = layer_norm(x, bw.ln1_g, bw.ln1_b, cfg_.ln_eps, &ln1);
            Mat qkv = (a * bw.attn_qkv_w).rowwise() + bw.attn_qkv_b.transpose();

            Mat& K = cache.K[static_cast<size_t>(b)];
            Mat& V = cache.V[static_cast<size_t>(b)];
            Eigen::Index prev = K.rows();
            K.conservativeResize(prev + n, d);
            V.conservativeResize(prev + n, d);
            K.bottomRows(n) = qkv.middleCols(d, d);
            V.bottomRows(n) = qkv.middleCols(2 * d, d);

            Mat zcat(n, d);
            for (int h = 0; h < H; ++h) {
                auto q = qkv.middleCols(h * dh, dh);
                auto k_all = K.middleCols(h * dh, dh);
                auto v_all = V.middleCols(h * dh, dh);
                for (int i = 0; i < n; ++i) {
                    Eigen::Index keys = prev + i + 1;
                    Eigen::RowVectorXd logit = (q.row(i) * k_all.topRows(keys).transpose()) * scale;
                    double mx = logit.maxCoeff();
                    Eigen::ArrayXd e = (logit.array() - mx).exp();
                    Eigen::RowVectorXd p = (e / e.sum()).matrix();
                    zcat.block(i, h * dh, 1, dh) = p * v_all.topRows(keys);
                }
            }
            Mat attn_out = (zcat * bw.attn_proj_w).rowwise() + bw.attn_proj_b.transpose();
            x = x + attn_out;
            Mat bmat = layer_norm(x, bw.ln2_g, bw.ln2_b, cfg_.ln_eps, nullptr);
            Mat f = (bmat * bw.mlp_fc_w).rowwise() + bw.mlp_fc_b.transpose();
            x = x + ((gelu(f) * bw.mlp_proj_w).rowwise() + bw.mlp_proj_b.transpose());
            fire(b + 1, x);
        }
        return x;
    };

    auto next_token = [&](const Mat& x_rows) -> int {
        Mat fin = layer_norm(x_rows.bottomRows(1), w_.lnf_g, w_.lnf_b, cfg_.ln_eps, nullptr);
        Eigen::RowVectorXd logits = fin * w_.wte.transpose();
        int best = 0;
        for (int v = 1; v < cfg_.vocab_size; ++v) {
            if (logits(v) > logits(best)) best = v;  // first occurrence wins ties
        }
        return best;
    };

    Mat x_last = run_rows(prompt, 0);
    for (int step = 0; step < max_new_tokens; ++step) {
        if (static_cast<int>(out.size()) >= cfg_.n_ctx) break;
        int nxt = next_token(x_last);
        out.push_back(nxt);
        if (nxt == eot_id) break;
        if (step + 1 >= max_new_tokens) break;
        x_last = run_rows({nxt}, static_cast<int>(out.size()) - 1);
    }
    return out;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

AdamW::AdamW(const ModelConfig& cfg, double lr, double beta1, double beta2, double eps,
             double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay),
      m_(Weights::zeros_like(cfg)), v_(Weights::zeros_like(cfg)) {}

void AdamW::step(Weights& w, const Weights& grads) {
    ++t_;
    auto wv = tensor_views(w);
    auto gv = tensor_views(const_cast<Weights&>(grads));
    auto mv = tensor_views(m_);
    auto vv = tensor_views(v_);
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < wv.size(); ++i) {
        auto n = static_cast<Eigen::Index>(wv[i].size());
        Eigen::Map<Eigen::ArrayXd> p(wv[i].data, n), m(mv[i].data, n), v(vv[i].data, n);
        Eigen::Map<const Eigen::ArrayXd> g(gv[i].data, n);
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g.square();
        p -= lr_ * ((m / bc1) / ((v / bc2).sqrt() + eps_) + weight_decay_ * p);
    }
}

// ---------------------------------------------------------------------------
// Document preparation
// ---------------------------------------------------------------------------

void TokenizedDoc::validate() const {
    const int T = static_cast<int>(tokens.size());
    if (!(context_len > 0 && context_len < T)) {
        throw RuntimeError("doc " + example_id + ": invalid context_len");
    }
    if (!(sent_begin >= context_len && sent_begin < sent_end && sent_end <= T)) {
        throw RuntimeError("doc " + example_id + ": invalid sentence span");
    }
    if (t_star != sent_end - 1) throw RuntimeError("doc " + example_id + ": t_star != max(S)");
}

TokenizedDoc prepare_doc(const corpus::Example& example, const tok::Tokenizer& tokenizer) {
    TokenizedDoc doc;
    doc.example_id = example.id;
    const std::string ctx = example.context + "\n";
    std::vector<int> ctx_tokens = tokenizer.encode(ctx);
    std::vector<int> cont_tokens = tokenizer.encode(example.continuation);
    if (cont_tokens.empty()) {
        throw RuntimeError("doc " + example.id + ": continuation tokenizes to zero tokens");
    }
    if (ctx_tokens.empty()) {
        throw RuntimeError("doc " + example.id + ": context tokenizes to zero tokens");
    }
    doc.context_len = static_cast<int>(ctx_tokens.size());
    doc.tokens = std::move(ctx_tokens);
    doc.tokens.insert(doc.tokens.end(), cont_tokens.begin(), cont_tokens.end());

    // byte offsets of each continuation token (tokenization is lossless)
    std::vector<size_t> tok_begin(cont_tokens.size()), tok_end(cont_tokens.size());
    size_t off = 0;
    for (size_t i = 0; i < cont_tokens.size(); ++i) {
        tok_begin[i] = off;
        off += tokenizer.decode({cont_tokens[i]}).size();
        tok_end[i] = off;
    }

    auto sentences = text::split_sentences(example.continuation);
    if (sentences.empty()) {
        doc.span_fallback = true;
        doc.sent_begin = doc.context_len;
        doc.sent_end = static_cast<int>(doc.tokens.size());
    } else {
        const auto& last = sentences.back();
        int first = -1, last_idx = -1;
        for (size_t i = 0; i < cont_tokens.size(); ++i) {
            bool overlaps = tok_begin[i] < last.end && tok_end[i] > last.begin;
            if (overlaps) {
                if (first < 0) first = static_cast<int>(i);
                last_idx = static_cast<int>(i);
            }
        }
        if (first < 0) {
            doc.span_fallback = true;
            doc.sent_begin = doc.context_len;
            doc.sent_end = static_cast<int>(doc.tokens.size());
        } else {
            doc.sent_begin = doc.context_len + first;
            doc.sent_end = doc.context_len + last_idx + 1;
        }
    }
    doc.t_star = doc.sent_end - 1;
    doc.validate();
    return doc;
}

}  // namespace obsprobe::observer
