#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "obsprobe/corpus.hpp"
#include "obsprobe/tokenizer.hpp"
#include "obsprobe/util.hpp"

namespace obsprobe::observer {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

// Layer indexing: a "layer" key k in [0, L] names a residual stream: k = 0 is
// the embedding stream, k >= 1 is the stream leaving block k-1 (raw, no final
// norm). Blocks themselves are indexed 0..L-1; block b writes into stream b+1.

struct ModelConfig {
    std::string model_id;
    int n_layer = 0;
    int n_head = 0;
    int n_embd = 0;
    int n_ctx = 0;
    int vocab_size = 0;
    double ln_eps = 1e-5;

    int head_dim() const { return n_embd / n_head; }
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

struct BlockWeights {
    Vec ln1_g, ln1_b, ln2_g, ln2_b;
    Mat attn_qkv_w;   // [d, 3d]
    Vec attn_qkv_b;
    Mat attn_proj_w;  // [d, d]
    Vec attn_proj_b;
    Mat mlp_fc_w;     // [d, 4d]
    Vec mlp_fc_b;
    Mat mlp_proj_w;   // [4d, d]
    Vec mlp_proj_b;
};

/// Full parameter set; unembedding is tied to wte.
struct Weights {
    Mat wte;  // [V, d]
    Mat wpe;  // [n_ctx, d]
    std::vector<BlockWeights> blocks;
    Vec lnf_g, lnf_b;

    static Weights zeros_like(const ModelConfig& cfg);
    void add_scaled(const Weights& other, double scale);
    void set_zero();
    double sq_norm() const;
};

/// A named flat view of one parameter tensor.
struct TensorView {
    std::string name;
    double* data;
    size_t rows, cols;  // cols = 1 for vectors
    size_t size() const { return rows * cols; }
};

/// All parameter tensors of `w` in a fixed serialization order.
std::vector<TensorView> tensor_views(Weights& w);

/// On-disk element type; f16 is widened back to f32 on read.
enum class Dtype { f32, f16 };

struct CaptureSpec {
    std::vector<int> layers;  // residual stream keys to keep, each in [0, L]
    bool capture_attention = false;
    bool capture_head_outputs = false;
    bool capture_mlp_outputs = false;
    bool capture_logits = false;
    Dtype dtype = Dtype::f32;

    void validate(int n_layer) const;
};

struct CapturedActivations {
    int T = 0;
    std::map<int, Mat> resid;                     // stream key -> [T, d]
    std::map<int, std::vector<Mat>> attn;         // block -> per-head [T, T]
    std::map<std::pair<int, int>, Mat> head_out;  // (block, head) -> [T, d]
    std::map<int, Mat> mlp_out;                   // block -> [T, d]
    Mat logits;                                   // [T, V] when requested
};

/// Mutation applied to one residual stream during the forward pass.
/// `row` selects a single token position, or -1 for all rows.
struct ResidHook {
    int layer = 0;  // stream key in [0, L]
    int row = -1;
    std::function<void(Eigen::Ref<Eigen::RowVectorXd>)> fn;
};

/// Rescales block `block`'s MLP output by (1 + delta) before it is added to
/// the residual stream. Used for first-order attribution checks.
struct MlpScale {
    int block = -1;
    double delta = 0.0;
};

struct GradientResult {
    double score = 0.0;                // s = w . resid[layer][t] + b
    std::map<int, Mat> resid_grads;    // stream key -> [T, d], keys 0..layer
    CapturedActivations acts;          // whatever the spec requested
};

class Model {
public:
    Model(ModelConfig cfg, Weights w);

    static Model load(const fs::path& dir);
    void save(const fs::path& dir) const;

    const ModelConfig& config() const { return cfg_; }
    const Weights& weights() const { return w_; }
    Weights& mutable_weights() { return w_; }

    /// One forward pass with capture and optional interventions.
    CapturedActivations forward(const std::vector<int>& tokens, const CaptureSpec& spec,
                                const std::vector<ResidHook>& hooks = {},
                                const MlpScale& mlp_scale = {}) const;

    /// Probe score s = w . resid[layer][t_star] + b plus gradients of s with
    /// respect to every residual stream key <= layer. `spec` controls which
    /// extra tensors come back (head/MLP outputs for attribution).
    GradientResult score_gradients(const std::vector<int>& tokens, int layer, int t_star,
                                   const Vec& w, double b, const CaptureSpec& spec,
                                   const MlpScale& mlp_scale = {}) const;

    /// Mean next-token cross-entropy of one sequence; if `grads` is non-null,
    /// accumulates d(loss)/d(weights) into it (scaled by `grad_scale`).
    double lm_loss(const std::vector<int>& tokens, Weights* grads = nullptr,
                   double grad_scale = 1.0) const;

    /// Greedy decoding with a KV cache. Stops after max_new_tokens or at
    /// eot_id (if >= 0). Hooks with row == prompt_len-1 fire during prefill;
    /// hooks with row == -1 fire at every decode step.
    std::vector<int> generate_greedy(const std::vector<int>& prompt, int max_new_tokens,
                                     const std::vector<ResidHook>& hooks = {},
                                     int eot_id = -1) const;

private:
    ModelConfig cfg_;
    Weights w_;
};

/// Decoupled-weight-decay Adam over a Weights pytree.
class AdamW {
public:
    AdamW(const ModelConfig& cfg, double lr, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8, double weight_decay = 0.0);
    void step(Weights& w, const Weights& grads);
    int steps_taken() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    int t_ = 0;
    Weights m_, v_;
};

// ---------------------------------------------------------------------------
// Document preparation
// ---------------------------------------------------------------------------

struct TokenizedDoc {
    std::string example_id;
    std::vector<int> tokens;
    int context_len = 0;     // N: tokens of X plus the separator
    int sent_begin = 0;      // final-sentence span S = [sent_begin, sent_end)
    int sent_end = 0;
    int t_star = 0;          // max(S)
    bool span_fallback = false;  // no sentence found in Y; S = all continuation tokens

    void validate() const;
};

/// Concatenates context + "\n" + continuation (tokenized per segment so N is
/// unambiguous), locates the last continuation sentence, and sets t*.
TokenizedDoc prepare_doc(const corpus::Example& example, const tok::Tokenizer& tokenizer);

}  // namespace obsprobe::observer
