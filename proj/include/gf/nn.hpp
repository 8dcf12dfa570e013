#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "gf/core.hpp"
#include "json.hpp"

namespace gf::nn {

// Define-by-run autograd on double tensors. Single threaded and sequential,
// so training and sampling are bit-reproducible for a fixed seed.

struct Tensor {
    std::vector<int> dims;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> d, double fill = 0.0);
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.dims); }

    int64_t numel() const;
    int dim(int i) const { return dims[size_t(i)]; }
    int ndim() const { return int(dims.size()); }
    bool same_shape(const Tensor& o) const { return dims == o.dims; }
    std::string shape_str() const;
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // empty until touched by backward
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void()> back;  // accumulates this->grad into parents

    void ensure_grad();
};

Var make_var(Tensor t, bool requires_grad = false);
inline Var make_const(Tensor t) { return make_var(std::move(t), false); }

// Disables graph construction inside its scope (sampling / evaluation).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};
bool grad_enabled();

// Runs reverse-mode accumulation from a scalar root.
void backward(const Var& root);

// ---------------------------------------------------------------------------
// Ops. Tensors are row-major; images are (B, C, H, W), token contexts are
// (B, L, D).

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var silu(const Var& a);
Var tanh_op(const Var& a);
Var concat_ch(const Var& a, const Var& b);
Var upsample2(const Var& a);
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var linear(const Var& x, const Var& w, const Var& b);
Var embedding(const Var& table, const std::vector<int>& ids, int B, int L);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var add_bias_bc(const Var& x, const Var& y);  // (B,C,H,W) + (B,C)
Var chw_to_lc(const Var& x);                  // (B,C,H,W) -> (B,HW,C)
Var lc_to_chw(const Var& x, int h, int w);    // inverse
Var bmm_nt(const Var& a, const Var& b);       // (B,P,C) x (B,L,C) -> (B,P,L)
Var bmm_nn(const Var& a, const Var& b);       // (B,P,L) x (B,L,C) -> (B,P,C)
Var softmax_last(const Var& x, double pre_scale);
Var global_avg_pool(const Var& x);  // (B,C,H,W) -> (B,C), mean over H,W
// Mean over the batch of -log softmax(logits)[target]; logits (B,K).
Var cross_entropy_logits(const Var& logits, const std::vector<int>& targets);
Var mse(const Var& a, const Tensor& target);
// Weighted mse: weight is (B,1,H,W), broadcast over channels, normalized by
// sum(weight) * C so an all-ones weight equals plain mse.
Var masked_mse(const Var& a, const Tensor& target, const Tensor& weight);

// ---------------------------------------------------------------------------
// Layers.

struct ParamRef {
    std::string name;
    Var p;
};

using ParamList = std::vector<ParamRef>;

uint64_t params_hash(const ParamList& params);
void set_trainable(const ParamList& params, bool trainable);

struct Linear {
    Var W, b;
    int din = 0, dout = 0;
    Linear() = default;
    Linear(int din_, int dout_, Rng& rng, bool zero_init = false);
    Var forward(const Var& x) const { return linear(x, W, b); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv2d {
    Var W, b;
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
    Conv2d() = default;
    Conv2d(int cin_, int cout_, int k_, int stride_, int pad_, Rng& rng, bool zero_init = false);
    Var forward(const Var& x) const { return conv2d(x, W, b, stride, pad); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct GroupNorm {
    Var gamma, beta;
    int groups = 8;
    GroupNorm() = default;
    GroupNorm(int channels, int groups_);
    Var forward(const Var& x) const { return group_norm(x, gamma, beta, groups); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct Embedding {
    Var table;
    int vocab = 0, dim = 0;
    Embedding() = default;
    Embedding(int vocab_, int dim_, Rng& rng);
    Var forward(const std::vector<int>& ids, int B, int L) const {
        return embedding(table, ids, B, L);
    }
    void collect(const std::string& prefix, ParamList& out) const;
};

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.

struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.01;
    int64_t t = 0;

    void step(const ParamList& params);
    void zero_grad(const ParamList& params);

  private:
    struct Slot {
        Tensor m, v;
    };
    std::unordered_map<Node*, Slot> slots_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, u32 JSON header length, JSON header, raw little-endian
// f64 payload in header order. Writes are atomic.

struct CheckpointMeta {
    std::string kind;
    std::string config_hash;
    int stage = 0;
    int64_t step = 0;
    nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const ParamList& params);
CheckpointMeta load_checkpoint(const std::filesystem::path& path, const ParamList& params);
CheckpointMeta peek_checkpoint(const std::filesystem::path& path);

}  // namespace gf::nn
