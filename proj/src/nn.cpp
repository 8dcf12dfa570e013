#include "gf/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace fs = std::filesystem;

namespace gf::nn {

using EMat = Eigen::MatrixXd;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using CMapV = Eigen::Map<const Eigen::VectorXd>;

Tensor::Tensor(std::vector<int> d, double fill) : dims(std::move(d)) {
    int64_t n = 1;
    for (int x : dims) {
        if (x <= 0) throw Error(ErrKind::internal, "tensor dim must be positive");
        n *= x;
    }
    v.assign(size_t(n), fill);
}

int64_t Tensor::numel() const { return int64_t(v.size()); }

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << ")";
    return os.str();
}

void Node::ensure_grad() {
    if (grad.v.empty()) grad = Tensor::zeros_like(val);
}

static thread_local bool g_grad_enabled = true;

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }
bool grad_enabled() { return g_grad_enabled; }

Var make_var(Tensor t, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = requires_grad && g_grad_enabled;
    return n;
}

// Creates the result node for an op. Parent links and the backward closure
// are only retained when some parent needs gradients.
static Var make_op(Tensor val, std::vector<Var> parents, std::function<void()> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    bool rg = false;
    if (g_grad_enabled)
        for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->back = std::move(back);
    }
    return n;
}

void backward(const Var& root) {
    if (!root) throw Error(ErrKind::internal, "backward on null var");
    if (root->val.numel() != 1)
        throw Error(ErrKind::internal, "backward root must be scalar, got " + root->val.shape_str());
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad.v[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->back) (*it)->back();
}

static void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw Error(ErrKind::internal, std::string(op) + ": shape mismatch " +
                                           a->val.shape_str() + " vs " + b->val.shape_str());
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->val;
    CMapV bv(b->val.v.data(), b->val.numel());
    MapV(out.v.data(), out.numel()) += bv;
    Node* ap = a.get();
    Node* bp = b.get();
    auto res = make_op(std::move(out), {a, b}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [ap, bp, rp] {
            CMapV g(rp->grad.v.data(), rp->grad.numel());
            if (ap->requires_grad) {
                ap->ensure_grad();
                MapV(ap->grad.v.data(), g.size()) += g;
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                MapV(bp->grad.v.data(), g.size()) += g;
            }
        };
    return res;
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b->val.v[i];
    Node* ap = a.get();
    Node* bp = b.get();
    auto res = make_op(std::move(out), {a, b}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [ap, bp, rp] {
            const auto& g = rp->grad.v;
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) ap->grad.v[i] += g[i] * bp->val.v[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) bp->grad.v[i] += g[i] * ap->val.v[i];
            }
        };
    return res;
}

Var scale(const Var& a, double s) {
    Tensor out = a->val;
    MapV(out.v.data(), out.numel()) *= s;
    Node* ap = a.get();
    auto res = make_op(std::move(out), {a}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [ap, rp, s] {
            ap->ensure_grad();
            MapV(ap->grad.v.data(), ap->grad.numel()) +=
                s * CMapV(rp->grad.v.data(), rp->grad.numel());
        };
    return res;
}

Var silu(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = x / (1.0 + std::exp(-x));
    Node* ap = a.get();
    auto res = make_op(std::move(out), {a}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [ap, rp] {
            ap->ensure_grad();
            for (size_t i = 0; i < rp->grad.v.size(); ++i) {
                const double x = ap->val.v[i];
                const double sig = 1.0 / (1.0 + std::exp(-x));
                ap->grad.v[i] += rp->grad.v[i] * sig * (1.0 + x * (1.0 - sig));
            }
        };
    return res;
}

Var tanh_op(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::tanh(x);
    Node* ap = a.get();
    auto res = make_op(std::move(out), {a}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [ap, rp] {
            ap->ensure_grad();
            for (size_t i = 0; i < rp->grad.v.size(); ++i) {
                const double y = rp->val.v[i];
                ap->grad.v[i] += rp->grad.v[i] * (1.0 - y * y);
            }
        };
    return res;
}

Var concat_ch(const Var& a, const Var& b) {
    const auto& da = a->val.dims;
    const auto& db = b->val.dims;
    if (da.size() != 4 || db.size() != 4 || da[0] != db[0] || da[2] != db[2] || da[3] != db[3])
        throw Error(ErrKind::internal, "concat_ch: incompatible shapes " + a->val.shape_str() +
                                           " vs " + b->val.shape_str());
    const int B = da[0], Ca = da[1], Cb = db[1], H = da[2], W = da[3];
    const size_t plane = size_t(H) * W;
    Tensor out({B, Ca + Cb, H, W});
    for (int bi = 0; bi < B; ++bi) {
        std::memcpy(out.v.data() + size_t(bi) * (Ca + Cb) * plane,
                    a->val.v.data() + size_t(bi) * Ca * plane, Ca * plane * 8);
        std::memcpy(out.v.data() + (size_t(bi) * (Ca + Cb) + Ca) * plane,
                    b->val.v.data() + size_t(bi) * Cb * plane, Cb * plane * 8);
    }
    Node* ap = a.get();
    Node* bp = b.get();
    auto res = make_op(std::move(out), {a, b}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [ap, bp, rp, B, Ca, Cb, plane] {
            for (int bi = 0; bi < B; ++bi) {
                const double* g = rp->grad.v.data() + size_t(bi) * (Ca + Cb) * plane;
                if (ap->requires_grad) {
                    ap->ensure_grad();
                    double* dst = ap->grad.v.data() + size_t(bi) * Ca * plane;
                    for (size_t i = 0; i < Ca * plane; ++i) dst[i] += g[i];
                }
                if (bp->requires_grad) {
                    bp->ensure_grad();
                    double* dst = bp->grad.v.data() + size_t(bi) * Cb * plane;
                    const double* gb = g + Ca * plane;
                    for (size_t i = 0; i < Cb * plane; ++i) dst[i] += gb[i];
                }
            }
        };
    return res;
}

Var upsample2(const Var& a) {
    const auto& d = a->val.dims;
    if (d.size() != 4) throw Error(ErrKind::internal, "upsample2 expects (B,C,H,W)");
    const int B = d[0], C = d[1], H = d[2], W = d[3];
    Tensor out({B, C, 2 * H, 2 * W});
    for (int bc = 0; bc < B * C; ++bc) {
        const double* src = a->val.v.data() + size_t(bc) * H * W;
        double* dst = out.v.data() + size_t(bc) * 4 * H * W;
        for (int y = 0; y < 2 * H; ++y)
            for (int x = 0; x < 2 * W; ++x) dst[y * 2 * W + x] = src[(y / 2) * W + x / 2];
    }
    Node* ap = a.get();
    auto res = make_op(std::move(out), {a}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [ap, rp, B, C, H, W] {
            ap->ensure_grad();
            for (int bc = 0; bc < B * C; ++bc) {
                double* dst = ap->grad.v.data() + size_t(bc) * H * W;
                const double* g = rp->grad.v.data() + size_t(bc) * 4 * H * W;
                for (int y = 0; y < 2 * H; ++y)
                    for (int x = 0; x < 2 * W; ++x) dst[(y / 2) * W + x / 2] += g[y * 2 * W + x];
            }
        };
    return res;
}

// ---------------------------------------------------------------------------
// conv2d via im2col + GEMM. Row-major (C,K) weights are used as column-major
// (K,C) transposed views so everything stays allocation-light.

static thread_local std::vector<double> g_col_scratch;

static void im2col(const double* x, int C, int H, int W, int k, int stride, int pad, int Ho,
                   int Wo, double* col) {
    const int K = C * k * k;
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            double* dst = col + size_t(oy * Wo + ox) * K;
            const int iy0 = oy * stride - pad;
            const int ix0 = ox * stride - pad;
            int idx = 0;
            for (int c = 0; c < C; ++c) {
                const double* plane = x + size_t(c) * H * W;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = iy0 + ky;
                    if (iy < 0 || iy >= H) {
                        for (int kx = 0; kx < k; ++kx) dst[idx++] = 0.0;
                        continue;
                    }
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ix0 + kx;
                        dst[idx++] = (ix < 0 || ix >= W) ? 0.0 : plane[iy * W + ix];
                    }
                }
            }
        }
    }
}

static void col2im_add(const double* col, int C, int H, int W, int k, int stride, int pad, int Ho,
                       int Wo, double* dx) {
    const int K = C * k * k;
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            const double* src = col + size_t(oy * Wo + ox) * K;
            const int iy0 = oy * stride - pad;
            const int ix0 = ox * stride - pad;
            int idx = 0;
            for (int c = 0; c < C; ++c) {
                double* plane = dx + size_t(c) * H * W;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = iy0 + ky;
                    if (iy < 0 || iy >= H) {
                        idx += k;
                        continue;
                    }
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ix0 + kx;
                        if (ix >= 0 && ix < W) plane[iy * W + ix] += src[idx];
                        ++idx;
                    }
                }
            }
        }
    }
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const auto& xd = x->val.dims;
    const auto& wd = w->val.dims;
    if (xd.size() != 4 || wd.size() != 4)
        throw Error(ErrKind::internal, "conv2d expects (B,C,H,W) and (Co,Ci,k,k)");
    const int B = xd[0], Ci = xd[1], H = xd[2], W = xd[3];
    const int Co = wd[0], k = wd[2];
    if (wd[1] != Ci || wd[3] != k)
        throw Error(ErrKind::internal, "conv2d: weight " + w->val.shape_str() +
                                           " does not match input " + x->val.shape_str());
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    const int K = Ci * k * k;
    const int N = Ho * Wo;

    Tensor out({B, Co, Ho, Wo});
    g_col_scratch.resize(size_t(K) * N);
    double* col = g_col_scratch.data();
    CMapM Wt(w->val.v.data(), K, Co);  // row-major (Co,K) viewed as (K,Co)
    CMapV bias(b->val.v.data(), Co);
    for (int bi = 0; bi < B; ++bi) {
        im2col(x->val.v.data() + size_t(bi) * Ci * H * W, Ci, H, W, k, stride, pad, Ho, Wo, col);
        CMapM colM(col, K, N);
        MapM outT(out.v.data() + size_t(bi) * Co * N, N, Co);  // row-major (Co,N) as (N,Co)
        outT.noalias() = colM.transpose() * Wt;
        outT.rowwise() += bias.transpose();
    }

    Node* xp = x.get();
    Node* wp = w.get();
    Node* bp = b.get();
    auto res = make_op(std::move(out), {x, w, b}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [xp, wp, bp, rp, B, Ci, H, W, Co, k, stride, pad, Ho, Wo, K, N] {
            g_col_scratch.resize(size_t(K) * N);
            double* col = g_col_scratch.data();
            std::vector<double> dcol(size_t(K) * N);
            CMapM Wt(wp->val.v.data(), K, Co);
            if (xp->requires_grad) xp->ensure_grad();
            if (wp->requires_grad) wp->ensure_grad();
            if (bp->requires_grad) bp->ensure_grad();
            for (int bi = 0; bi < B; ++bi) {
                CMapM gT(rp->grad.v.data() + size_t(bi) * Co * N, N, Co);
                if (bp->requires_grad) {
                    // fixed-order reduction: Eigen redux picks its summation
                    // order from pointer alignment, which varies with the heap
                    const double* g = rp->grad.v.data() + size_t(bi) * Co * N;
                    for (int c = 0; c < Co; ++c) {
                        double acc = 0;
                        for (int n = 0; n < N; ++n) acc += g[size_t(c) * N + n];
                        bp->grad.v[size_t(c)] += acc;
                    }
                }
                if (wp->requires_grad || xp->requires_grad)
                    im2col(xp->val.v.data() + size_t(bi) * Ci * H * W, Ci, H, W, k, stride, pad,
                           Ho, Wo, col);
                if (wp->requires_grad) {
                    CMapM colM(col, K, N);
                    MapM dWt(wp->grad.v.data(), K, Co);
                    dWt.noalias() += colM * gT;
                }
                if (xp->requires_grad) {
                    MapM dcolM(dcol.data(), K, N);
                    dcolM.noalias() = Wt * gT.transpose();
                    col2im_add(dcol.data(), Ci, H, W, k, stride, pad, Ho, Wo,
                               xp->grad.v.data() + size_t(bi) * Ci * H * W);
                }
            }
        };
    return res;
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const auto& xd = x->val.dims;
    const auto& wd = w->val.dims;
    if (xd.empty() || wd.size() != 2)
        throw Error(ErrKind::internal, "linear expects (...,Din) and (Dout,Din)");
    const int Din = xd.back();
    const int Dout = wd[0];
    if (wd[1] != Din)
        throw Error(ErrKind::internal, "linear: weight " + w->val.shape_str() +
                                           " does not match input " + x->val.shape_str());
    const int64_t M = x->val.numel() / Din;
    std::vector<int> od(xd.begin(), xd.end() - 1);
    od.push_back(Dout);
    Tensor out(od);
    CMapM Xt(x->val.v.data(), Din, M);  // row-major (M,Din) as (Din,M)
    CMapM Wt(w->val.v.data(), Din, Dout);
    CMapV bias(b->val.v.data(), Dout);
    MapM outT(out.v.data(), Dout, M);
    outT.noalias() = Wt.transpose() * Xt;
    outT.colwise() += bias;

    Node* xp = x.get();
    Node* wp = w.get();
    Node* bp = b.get();
    auto res = make_op(std::move(out), {x, w, b}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [xp, wp, bp, rp, Din, Dout, M] {
            CMapM gT(rp->grad.v.data(), Dout, M);
            if (bp->requires_grad) {
                bp->ensure_grad();
                // fixed-order reduction, see conv2d backward
                const double* g = rp->grad.v.data();
                for (int m = 0; m < M; ++m)
                    for (int d = 0; d < Dout; ++d)
                        bp->grad.v[size_t(d)] += g[size_t(m) * Dout + d];
            }
            if (wp->requires_grad) {
                wp->ensure_grad();
                CMapM Xt(xp->val.v.data(), Din, M);
                MapM dWt(wp->grad.v.data(), Din, Dout);
                dWt.noalias() += Xt * gT.transpose();
            }
            if (xp->requires_grad) {
                xp->ensure_grad();
                CMapM Wt(wp->val.v.data(), Din, Dout);
                MapM dXt(xp->grad.v.data(), Din, M);
                dXt.noalias() += Wt * gT;
            }
        };
    return res;
}

Var embedding(const Var& table, const std::vector<int>& ids, int B, int L) {
    const auto& td = table->val.dims;
    if (td.size() != 2) throw Error(ErrKind::internal, "embedding table must be (V,D)");
    if (int(ids.size()) != B * L)
        throw Error(ErrKind::internal, "embedding: ids size does not match (B,L)");
    const int V = td[0], D = td[1];
    for (int id : ids)
        if (id < 0 || id >= V)
            throw Error(ErrKind::internal, "embedding: id out of range: " + std::to_string(id));
    Tensor out({B, L, D});
    for (int i = 0; i < B * L; ++i)
        std::memcpy(out.v.data() + size_t(i) * D, table->val.v.data() + size_t(ids[i]) * D,
                    size_t(D) * 8);
    Node* tp = table.get();
    auto res = make_op(std::move(out), {table}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [tp, rp, ids, B, L, D] {
            tp->ensure_grad();
            for (int i = 0; i < B * L; ++i) {
                double* dst = tp->grad.v.data() + size_t(ids[i]) * D;
                const double* g = rp->grad.v.data() + size_t(i) * D;
                for (int d = 0; d < D; ++d) dst[d] += g[d];
            }
        };
    return res;
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const auto& d = x->val.dims;
    if (d.size() != 4 && d.size() != 3)
        throw Error(ErrKind::internal, "group_norm expects (B,C,H,W) or (B,L,C)");
    // (B,L,C) is handled by treating positions as spatial: not needed today.
    const int B = d[0], C = d[1];
    const int S = int(x->val.numel() / (int64_t(B) * C));  // spatial size
    if (C % groups != 0) throw Error(ErrKind::internal, "group_norm: C % groups != 0");
    const int cpg = C / groups;
    const int64_t m = int64_t(cpg) * S;

    Tensor out = x->val;
    std::vector<double> means(size_t(B) * groups), rstds(size_t(B) * groups);
    for (int bi = 0; bi < B; ++bi)
        for (int g = 0; g < groups; ++g) {
            const double* p = x->val.v.data() + (size_t(bi) * C + size_t(g) * cpg) * S;
            double sum = 0, sq = 0;
            for (int64_t i = 0; i < m; ++i) {
                sum += p[i];
                sq += p[i] * p[i];
            }
            const double mean = sum / double(m);
            const double var = std::max(0.0, sq / double(m) - mean * mean);
            const double rstd = 1.0 / std::sqrt(var + eps);
            means[size_t(bi) * groups + g] = mean;
            rstds[size_t(bi) * groups + g] = rstd;
            double* q = out.v.data() + (size_t(bi) * C + size_t(g) * cpg) * S;
            for (int c = 0; c < cpg; ++c) {
                const double ga = gamma->val.v[size_t(g) * cpg + c];
                const double be = beta->val.v[size_t(g) * cpg + c];
                for (int s = 0; s < S; ++s) {
                    const size_t i = size_t(c) * S + s;
                    q[i] = (q[i] - mean) * rstd * ga + be;
                }
            }
        }

    Node* xp = x.get();
    Node* gp = gamma.get();
    Node* bp = beta.get();
    auto res = make_op(std::move(out), {x, gamma, beta}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [xp, gp, bp, rp, B, C, S, groups, cpg, m, means, rstds] {
            if (xp->requires_grad) xp->ensure_grad();
            if (gp->requires_grad) gp->ensure_grad();
            if (bp->requires_grad) bp->ensure_grad();
            for (int bi = 0; bi < B; ++bi)
                for (int g = 0; g < groups; ++g) {
                    const double mean = means[size_t(bi) * groups + g];
                    const double rstd = rstds[size_t(bi) * groups + g];
                    const size_t base = (size_t(bi) * C + size_t(g) * cpg) * S;
                    const double* xv = xp->val.v.data() + base;
                    const double* gv = rp->grad.v.data() + base;
                    double sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (int c = 0; c < cpg; ++c) {
                        const double ga = gp->val.v[size_t(g) * cpg + c];
                        double dg = 0, db = 0;
                        for (int s = 0; s < S; ++s) {
                            const size_t i = size_t(c) * S + s;
                            const double xhat = (xv[i] - mean) * rstd;
                            const double dxhat = gv[i] * ga;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dg += gv[i] * xhat;
                            db += gv[i];
                        }
                        if (gp->requires_grad) gp->grad.v[size_t(g) * cpg + c] += dg;
                        if (bp->requires_grad) bp->grad.v[size_t(g) * cpg + c] += db;
                    }
                    if (xp->requires_grad) {
                        const double mean_dxhat = sum_dxhat / double(m);
                        const double mean_dxhat_xhat = sum_dxhat_xhat / double(m);
                        double* dxv = xp->grad.v.data() + base;
                        for (int c = 0; c < cpg; ++c) {
                            const double ga = gp->val.v[size_t(g) * cpg + c];
                            for (int s = 0; s < S; ++s) {
                                const size_t i = size_t(c) * S + s;
                                const double xhat = (xv[i] - mean) * rstd;
                                const double dxhat = gv[i] * ga;
                                dxv[i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                }
        };
    return res;
}

Var add_bias_bc(const Var& x, const Var& y) {
    const auto& xd = x->val.dims;
    const auto& yd = y->val.dims;
    if (xd.size() != 4 || yd.size() != 2 || xd[0] != yd[0] || xd[1] != yd[1])
        throw Error(ErrKind::internal, "add_bias_bc: want (B,C,H,W) + (B,C)");
    const int B = xd[0], C = xd[1];
    const size_t S = size_t(xd[2]) * xd[3];
    Tensor out = x->val;
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
            const double v = y->val.v[size_t(bi) * C + c];
            double* p = out.v.data() + (size_t(bi) * C + c) * S;
            for (size_t s = 0; s < S; ++s) p[s] += v;
        }
    Node* xp = x.get();
    Node* yp = y.get();
    auto res = make_op(std::move(out), {x, y}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [xp, yp, rp, B, C, S] {
            if (xp->requires_grad) {
                xp->ensure_grad();
                MapV(xp->grad.v.data(), xp->grad.numel()) +=
                    CMapV(rp->grad.v.data(), rp->grad.numel());
            }
            if (yp->requires_grad) {
                yp->ensure_grad();
                for (int bi = 0; bi < B; ++bi)
                    for (int c = 0; c < C; ++c) {
                        const double* g = rp->grad.v.data() + (size_t(bi) * C + c) * S;
                        double acc = 0;
                        for (size_t s = 0; s < S; ++s) acc += g[s];
                        yp->grad.v[size_t(bi) * C + c] += acc;
                    }
            }
        };
    return res;
}

Var chw_to_lc(const Var& x) {
    const auto& d = x->val.dims;
    if (d.size() != 4) throw Error(ErrKind::internal, "chw_to_lc expects (B,C,H,W)");
    const int B = d[0], C = d[1];
    const int P = d[2] * d[3];
    Tensor out({B, P, C});
    for (int bi = 0; bi < B; ++bi) {
        const double* src = x->val.v.data() + size_t(bi) * C * P;
        double* dst = out.v.data() + size_t(bi) * P * C;
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < P; ++p) dst[size_t(p) * C + c] = src[size_t(c) * P + p];
    }
    Node* xp = x.get();
    auto res = make_op(std::move(out), {x}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [xp, rp, B, C, P] {
            xp->ensure_grad();
            for (int bi = 0; bi < B; ++bi) {
                double* dst = xp->grad.v.data() + size_t(bi) * C * P;
                const double* g = rp->grad.v.data() + size_t(bi) * P * C;
                for (int c = 0; c < C; ++c)
                    for (int p = 0; p < P; ++p) dst[size_t(c) * P + p] += g[size_t(p) * C + c];
            }
        };
    return res;
}

Var lc_to_chw(const Var& x, int h, int w) {
    const auto& d = x->val.dims;
    if (d.size() != 3 || d[1] != h * w)
        throw Error(ErrKind::internal, "lc_to_chw: bad dims " + x->val.shape_str());
    const int B = d[0], P = d[1], C = d[2];
    Tensor out({B, C, h, w});
    for (int bi = 0; bi < B; ++bi) {
        const double* src = x->val.v.data() + size_t(bi) * P * C;
        double* dst = out.v.data() + size_t(bi) * C * P;
        for (int p = 0; p < P; ++p)
            for (int c = 0; c < C; ++c) dst[size_t(c) * P + p] = src[size_t(p) * C + c];
    }
    Node* xp = x.get();
    auto res = make_op(std::move(out), {x}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [xp, rp, B, C, P] {
            xp->ensure_grad();
            for (int bi = 0; bi < B; ++bi) {
                double* dst = xp->grad.v.data() + size_t(bi) * P * C;
                const double* g = rp->grad.v.data() + size_t(bi) * C * P;
                for (int p = 0; p < P; ++p)
                    for (int c = 0; c < C; ++c) dst[size_t(p) * C + c] += g[size_t(c) * P + p];
            }
        };
    return res;
}

Var bmm_nt(const Var& a, const Var& b) {
    const auto& da = a->val.dims;
    const auto& db = b->val.dims;
    if (da.size() != 3 || db.size() != 3 || da[0] != db[0] || da[2] != db[2])
        throw Error(ErrKind::internal, "bmm_nt: bad shapes " + a->val.shape_str() + " x " +
                                           b->val.shape_str());
    const int B = da[0], P = da[1], C = da[2], L = db[1];
    Tensor out({B, P, L});
    for (int bi = 0; bi < B; ++bi) {
        CMapM At(a->val.v.data() + size_t(bi) * P * C, C, P);
        CMapM Bt(b->val.v.data() + size_t(bi) * L * C, C, L);
        MapM Ot(out.v.data() + size_t(bi) * P * L, L, P);
        Ot.noalias() = Bt.transpose() * At;
    }
    Node* ap = a.get();
    Node* bp = b.get();
    auto res = make_op(std::move(out), {a, b}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [ap, bp, rp, B, P, C, L] {
            if (ap->requires_grad) ap->ensure_grad();
            if (bp->requires_grad) bp->ensure_grad();
            for (int bi = 0; bi < B; ++bi) {
                CMapM Gt(rp->grad.v.data() + size_t(bi) * P * L, L, P);
                if (ap->requires_grad) {
                    CMapM Bt(bp->val.v.data() + size_t(bi) * L * C, C, L);
                    MapM dAt(ap->grad.v.data() + size_t(bi) * P * C, C, P);
                    dAt.noalias() += Bt * Gt;
                }
                if (bp->requires_grad) {
                    CMapM At(ap->val.v.data() + size_t(bi) * P * C, C, P);
                    MapM dBt(bp->grad.v.data() + size_t(bi) * L * C, C, L);
                    dBt.noalias() += At * Gt.transpose();
                }
            }
        };
    return res;
}

Var bmm_nn(const Var& a, const Var& b) {
    const auto& da = a->val.dims;
    const auto& db = b->val.dims;
    if (da.size() != 3 || db.size() != 3 || da[0] != db[0] || da[2] != db[1])
        throw Error(ErrKind::internal, "bmm_nn: bad shapes " + a->val.shape_str() + " x " +
                                           b->val.shape_str());
    const int B = da[0], P = da[1], L = da[2], C = db[2];
    Tensor out({B, P, C});
    for (int bi = 0; bi < B; ++bi) {
        CMapM At(a->val.v.data() + size_t(bi) * P * L, L, P);
        CMapM Bt(b->val.v.data() + size_t(bi) * L * C, C, L);
        MapM Ot(out.v.data() + size_t(bi) * P * C, C, P);
        Ot.noalias() = Bt * At;
    }
    Node* ap = a.get();
    Node* bp = b.get();
    auto res = make_op(std::move(out), {a, b}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [ap, bp, rp, B, P, L, C] {
            if (ap->requires_grad) ap->ensure_grad();
            if (bp->requires_grad) bp->ensure_grad();
            for (int bi = 0; bi < B; ++bi) {
                CMapM Gt(rp->grad.v.data() + size_t(bi) * P * C, C, P);
                if (ap->requires_grad) {
                    CMapM Bt(bp->val.v.data() + size_t(bi) * L * C, C, L);
                    MapM dAt(ap->grad.v.data() + size_t(bi) * P * L, L, P);
                    dAt.noalias() += Bt.transpose() * Gt;
                }
                if (bp->requires_grad) {
                    CMapM At(ap->val.v.data() + size_t(bi) * P * L, L, P);
                    MapM dBt(bp->grad.v.data() + size_t(bi) * L * C, C, L);
                    dBt.noalias() += Gt * At.transpose();
                }
            }
        };
    return res;
}

Var softmax_last(const Var& x, double pre_scale) {
    const auto& d = x->val.dims;
    if (d.empty()) throw Error(ErrKind::internal, "softmax_last on scalar");
    const int L = d.back();
    const int64_t rows = x->val.numel() / L;
    Tensor out = x->val;
    for (int64_t r = 0; r < rows; ++r) {
        double* p = out.v.data() + r * L;
        double mx = -1e300;
        for (int i = 0; i < L; ++i) mx = std::max(mx, p[i] * pre_scale);
        double sum = 0;
        for (int i = 0; i < L; ++i) {
            p[i] = std::exp(p[i] * pre_scale - mx);
            sum += p[i];
        }
        for (int i = 0; i < L; ++i) p[i] /= sum;
    }
    Node* xp = x.get();
    auto res = make_op(std::move(out), {x}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad)
        res->back = [xp, rp, rows, L, pre_scale] {
            xp->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = rp->val.v.data() + r * L;
                const double* g = rp->grad.v.data() + r * L;
                double dot = 0;
                for (int i = 0; i < L; ++i) dot += g[i] * y[i];
                double* dx = xp->grad.v.data() + r * L;
                for (int i = 0; i < L; ++i) dx[i] += pre_scale * (g[i] - dot) * y[i];
            }
        };
    return res;
}

Var mse(const Var& a, const Tensor& target) {
    if (!a->val.same_shape(target))
        throw Error(ErrKind::internal, "mse: shape mismatch " + a->val.shape_str() + " vs " +
                                           target.shape_str());
    const int64_t n = a->val.numel();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = a->val.v[size_t(i)] - target.v[size_t(i)];
        acc += d * d;
    }
    Tensor out({1});
    out.v[0] = acc / double(n);
    Node* ap = a.get();
    auto res = make_op(std::move(out), {a}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad) {
        auto tgt = std::make_shared<Tensor>(target);
        res->back = [ap, rp, tgt, n] {
            ap->ensure_grad();
            const double g = rp->grad.v[0] * 2.0 / double(n);
            for (int64_t i = 0; i < n; ++i)
                ap->grad.v[size_t(i)] += g * (ap->val.v[size_t(i)] - tgt->v[size_t(i)]);
        };
    }
    return res;
}

Var global_avg_pool(const Var& x) {
    const auto& d = x->val.dims;
    if (d.size() != 4)
        throw Error(ErrKind::internal, "global_avg_pool: expected (B,C,H,W), got " +
                                           x->val.shape_str());
    const int B = d[0], C = d[1];
    const size_t S = size_t(d[2]) * d[3];
    Tensor out({B, C});
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
            const double* xv = x->val.v.data() + (size_t(bi) * C + c) * S;
            double acc = 0;
            for (size_t s = 0; s < S; ++s) acc += xv[s];
            out.v[size_t(bi) * C + c] = acc / double(S);
        }
    Node* xp = x.get();
    auto res = make_op(std::move(out), {x}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad) {
        res->back = [xp, rp, B, C, S] {
            xp->ensure_grad();
            for (int bi = 0; bi < B; ++bi)
                for (int c = 0; c < C; ++c) {
                    const double g = rp->grad.v[size_t(bi) * C + c] / double(S);
                    double* gv = xp->grad.v.data() + (size_t(bi) * C + c) * S;
                    for (size_t s = 0; s < S; ++s) gv[s] += g;
                }
        };
    }
    return res;
}

Var cross_entropy_logits(const Var& logits, const std::vector<int>& targets) {
    const auto& d = logits->val.dims;
    if (d.size() != 2)
        throw Error(ErrKind::internal, "cross_entropy_logits: expected (B,K), got " +
                                           logits->val.shape_str());
    const int B = d[0], K = d[1];
    if (int(targets.size()) != B)
        throw Error(ErrKind::internal, "cross_entropy_logits: target count mismatch");
    for (int t : targets)
        if (t < 0 || t >= K)
            throw Error(ErrKind::internal, "cross_entropy_logits: target out of range");
    // Mean over the batch of -log softmax(logits)[target], via the stable
    // log-sum-exp form; backward is the fused (softmax - onehot) / B.
    Tensor probs({B, K});
    double loss = 0;
    for (int bi = 0; bi < B; ++bi) {
        const double* lv = logits->val.v.data() + size_t(bi) * K;
        double* pv = probs.v.data() + size_t(bi) * K;
        double mx = lv[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, lv[k]);
        double z = 0;
        for (int k = 0; k < K; ++k) {
            pv[k] = std::exp(lv[k] - mx);
            z += pv[k];
        }
        for (int k = 0; k < K; ++k) pv[k] /= z;
        loss += std::log(z) + mx - lv[targets[size_t(bi)]];
    }
    Tensor out({1});
    out.v[0] = loss / double(B);
    Node* lp = logits.get();
    auto res = make_op(std::move(out), {logits}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad) {
        auto pr = std::make_shared<Tensor>(std::move(probs));
        auto tg = std::make_shared<std::vector<int>>(targets);
        res->back = [lp, rp, pr, tg, B, K] {
            lp->ensure_grad();
            const double g = rp->grad.v[0] / double(B);
            for (int bi = 0; bi < B; ++bi) {
                double* gv = lp->grad.v.data() + size_t(bi) * K;
                const double* pv = pr->v.data() + size_t(bi) * K;
                for (int k = 0; k < K; ++k)
                    gv[k] += g * (pv[k] - ((k == (*tg)[size_t(bi)]) ? 1.0 : 0.0));
            }
        };
    }
    return res;
}

Var masked_mse(const Var& a, const Tensor& target, const Tensor& weight) {
    const auto& d = a->val.dims;
    if (d.size() != 4 || !a->val.same_shape(target))
        throw Error(ErrKind::internal, "masked_mse: bad shapes");
    if (weight.ndim() != 4 || weight.dim(0) != d[0] || weight.dim(1) != 1 ||
        weight.dim(2) != d[2] || weight.dim(3) != d[3])
        throw Error(ErrKind::internal, "masked_mse: weight must be (B,1,H,W)");
    const int B = d[0], C = d[1];
    const size_t S = size_t(d[2]) * d[3];
    double wsum = 0;
    for (double v : weight.v) wsum += v;
    const double denom = wsum * C;
    Tensor out({1});
    double acc = 0;
    if (denom > 0) {
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < C; ++c) {
                const double* av = a->val.v.data() + (size_t(bi) * C + c) * S;
                const double* tv = target.v.data() + (size_t(bi) * C + c) * S;
                const double* wv = weight.v.data() + size_t(bi) * S;
                for (size_t s = 0; s < S; ++s) {
                    const double dd = av[s] - tv[s];
                    acc += wv[s] * dd * dd;
                }
            }
        acc /= denom;
    }
    out.v[0] = acc;
    Node* ap = a.get();
    auto res = make_op(std::move(out), {a}, nullptr);
    Node* rp = res.get();
    if (res->requires_grad && denom > 0) {
        auto tgt = std::make_shared<Tensor>(target);
        auto wt = std::make_shared<Tensor>(weight);
        res->back = [ap, rp, tgt, wt, B, C, S, denom] {
            ap->ensure_grad();
            const double g = rp->grad.v[0] * 2.0 / denom;
            for (int bi = 0; bi < B; ++bi)
                for (int c = 0; c < C; ++c) {
                    const size_t base = (size_t(bi) * C + c) * S;
                    const double* wv = wt->v.data() + size_t(bi) * S;
                    for (size_t s = 0; s < S; ++s)
                        ap->grad.v[base + s] +=
                            g * wv[s] * (ap->val.v[base + s] - tgt->v[base + s]);
                }
        };
    }
    return res;
}

// ---------------------------------------------------------------------------

uint64_t params_hash(const ParamList& params) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& pr : params) {
        h = fnv1a64(pr.name.data(), pr.name.size(), h);
        h = fnv1a64(pr.p->val.v.data(), pr.p->val.v.size() * 8, h);
    }
    return h;
}

void set_trainable(const ParamList& params, bool trainable) {
    for (const auto& pr : params) pr.p->requires_grad = trainable;
}

static Tensor randn_init(std::vector<int> dims, double std, Rng& rng) {
    Tensor t(std::move(dims));
    for (auto& v : t.v) v = rng.normal() * std;
    return t;
}

Linear::Linear(int din_, int dout_, Rng& rng, bool zero_init) : din(din_), dout(dout_) {
    const double std = zero_init ? 0.0 : std::sqrt(2.0 / din_);
    W = make_var(randn_init({dout_, din_}, std, rng), true);
    b = make_var(Tensor({dout_}), true);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".W", W});
    out.push_back({prefix + ".b", b});
}

Conv2d::Conv2d(int cin_, int cout_, int k_, int stride_, int pad_, Rng& rng, bool zero_init)
    : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
    const double std = zero_init ? 0.0 : std::sqrt(2.0 / (double(cin_) * k_ * k_));
    W = make_var(randn_init({cout_, cin_, k_, k_}, std, rng), true);
    b = make_var(Tensor({cout_}), true);
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".W", W});
    out.push_back({prefix + ".b", b});
}

GroupNorm::GroupNorm(int channels, int groups_) : groups(groups_) {
    Tensor g({channels});
    for (auto& v : g.v) v = 1.0;
    gamma = make_var(std::move(g), true);
    beta = make_var(Tensor({channels}), true);
}

void GroupNorm::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

Embedding::Embedding(int vocab_, int dim_, Rng& rng) : vocab(vocab_), dim(dim_) {
    table = make_var(randn_init({vocab_, dim_}, 0.02, rng), true);
}

void Embedding::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".table", table});
}

// ---------------------------------------------------------------------------

void AdamW::step(const ParamList& params) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (const auto& pr : params) {
        Node* n = pr.p.get();
        if (n->grad.v.empty()) n->ensure_grad();
        auto& slot = slots_[n];
        if (slot.m.v.empty()) {
            slot.m = Tensor::zeros_like(n->val);
            slot.v = Tensor::zeros_like(n->val);
        }
        for (size_t i = 0; i < n->val.v.size(); ++i) {
            const double g = n->grad.v[i];
            slot.m.v[i] = beta1 * slot.m.v[i] + (1.0 - beta1) * g;
            slot.v.v[i] = beta2 * slot.v.v[i] + (1.0 - beta2) * g * g;
            const double mhat = slot.m.v[i] / bc1;
            const double vhat = slot.v.v[i] / bc2;
            n->val.v[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * n->val.v[i]);
        }
    }
}

void AdamW::zero_grad(const ParamList& params) {
    for (const auto& pr : params) pr.p->grad.v.clear();
}

// ---------------------------------------------------------------------------

static constexpr char kCkptMagic[8] = {'G', 'F', 'C', 'K', 'P', 'T', '0', '1'};

void save_checkpoint(const fs::path& path, const CheckpointMeta& meta, const ParamList& params) {
    nlohmann::json header;
    header["kind"] = meta.kind;
    header["config_hash"] = meta.config_hash;
    header["stage"] = meta.stage;
    header["step"] = meta.step;
    header["extra"] = meta.extra;
    auto arrays = nlohmann::json::array();
    for (const auto& pr : params) {
        nlohmann::json a;
        a["name"] = pr.name;
        a["dims"] = pr.p->val.dims;
        arrays.push_back(a);
    }
    header["arrays"] = arrays;
    const std::string hs = header.dump();

    ByteWriter w;
    w.bytes(kCkptMagic, 8);
    w.u32(uint32_t(hs.size()));
    w.bytes(hs.data(), hs.size());
    for (const auto& pr : params)
        for (double v : pr.p->val.v) w.f64(v);
    write_file_atomic(path, w.buf);
}

static nlohmann::json read_ckpt_header(ByteReader& r, const fs::path& path) {
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kCkptMagic, 8) != 0)
        throw Error(ErrKind::io, "bad checkpoint magic in " + path.string());
    const uint32_t hlen = r.u32();
    std::string hs(hlen, '\0');
    r.bytes(hs.data(), hlen);
    nlohmann::json h = nlohmann::json::parse(hs, nullptr, false);
    if (h.is_discarded())
        throw Error(ErrKind::io, "unparseable checkpoint header in " + path.string());
    return h;
}

static CheckpointMeta meta_from_header(const nlohmann::json& h) {
    CheckpointMeta m;
    m.kind = h.value("kind", "");
    m.config_hash = h.value("config_hash", "");
    m.stage = h.value("stage", 0);
    m.step = h.value("step", int64_t(0));
    m.extra = h.value("extra", nlohmann::json::object());
    return m;
}

CheckpointMeta load_checkpoint(const fs::path& path, const ParamList& params) {
    const auto bytes = read_file(path);
    ByteReader r(bytes, path.string());
    nlohmann::json h = read_ckpt_header(r, path);
    const auto& arrays = h.at("arrays");
    if (arrays.size() != params.size())
        throw Error(ErrKind::validation,
                    "checkpoint " + path.string() + " has " + std::to_string(arrays.size()) +
                        " arrays, model expects " + std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& a = arrays[i];
        if (a.at("name").get<std::string>() != params[i].name)
            throw Error(ErrKind::validation, "checkpoint array name mismatch: " +
                                                 a.at("name").get<std::string>() + " vs " +
                                                 params[i].name);
        const auto dims = a.at("dims").get<std::vector<int>>();
        if (dims != params[i].p->val.dims)
            throw Error(ErrKind::validation,
                        "checkpoint shape mismatch for " + params[i].name);
    }
    for (const auto& pr : params)
        for (auto& v : pr.p->val.v) v = r.f64();
    if (r.remaining() != 0)
        throw Error(ErrKind::io, "trailing bytes in checkpoint " + path.string());
    return meta_from_header(h);
}

CheckpointMeta peek_checkpoint(const fs::path& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes, path.string());
    return meta_from_header(read_ckpt_header(r, path));
}

}  // namespace gf::nn
