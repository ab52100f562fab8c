#ifndef REFCOLOR_NN_HPP
#define REFCOLOR_NN_HPP

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "refcolor/graph.hpp"
#include "refcolor/rng.hpp"
#include "refcolor/tensor.hpp"

namespace refcolor {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/*------------------------------ ParameterStore ------------------------------*/

// Named parameters. std::map keeps iteration lexicographic, which fixes the
// order of optimizer updates, checkpoint layout and gradient reduction.
template <class Real>
class ParameterStoreT {
public:
    using Param = ParamT<Real>;

    Param& add(const std::string& name, TensorT<Real> init, bool trainable = true) {
        auto [it, fresh] = params_.try_emplace(name);
        if (!fresh)
            throw std::invalid_argument("parameter already exists: " + name);
        it->second.value     = std::move(init);
        it->second.trainable = trainable;
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Param& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument("no such parameter: " + name);
        return it->second;
    }
    const Param& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument("no such parameter: " + name);
        return it->second;
    }

    void zero_grads() {
        for (auto& [name, p] : params_)
            p.grad = TensorT<Real>();
    }

    // Marks trainable exactly the parameters matching any prefix.
    void set_trainable_prefixes(const std::vector<std::string>& prefixes) {
        for (auto& [name, p] : params_) {
            bool t = false;
            for (auto& pre : prefixes)
                if (name.rfind(pre, 0) == 0)
                    t = true;
            p.trainable = t;
        }
    }

    size_t count() const { return params_.size(); }
    size_t total_elements() const {
        size_t n = 0;
        for (auto& [name, p] : params_)
            n += p.value.size;
        return n;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Param> params_;
};

using ParameterStore  = ParameterStoreT<float>;
using ParameterStoreD = ParameterStoreT<double>;

template <class Real>
TensorT<Real> normal_init(Shape shape, double stddev, RngStream& rng) {
    TensorT<Real> t = TensorT<Real>::zeros(std::move(shape));
    for (size_t i = 0; i < t.size; i++)
        t.data[i] = (Real)(stddev * rng.next_gaussian());
    return t;
}

/*-------------------------------- module ops --------------------------------*/

// Per-graph parameter ref cache so a parameter used twice maps to one node.
template <class Real>
class ParamRefs {
public:
    ParamRefs(Graph<Real>& g, ParameterStoreT<Real>& store) : g_(g), store_(store) {}

    typename Graph<Real>::Ref operator()(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end())
            return it->second;
        auto ref = g_.param(store_.get(name));
        cache_.emplace(name, ref);
        return ref;
    }

    Graph<Real>& graph() { return g_; }
    ParameterStoreT<Real>& store() { return store_; }

private:
    Graph<Real>& g_;
    ParameterStoreT<Real>& store_;
    std::map<std::string, typename Graph<Real>::Ref> cache_;
};

template <class Real>
typename Graph<Real>::Ref linear(ParamRefs<Real>& p, typename Graph<Real>::Ref x, const std::string& prefix) {
    auto& g = p.graph();
    return g.affine(x, p(prefix + ".w"), p(prefix + ".b"));
}

// LayerNorm with learned gain/bias on top of the plain primitive.
template <class Real>
typename Graph<Real>::Ref layer_norm_affine(ParamRefs<Real>& p, typename Graph<Real>::Ref x, const std::string& prefix) {
    auto& g = p.graph();
    return g.add_rowvec(g.mul_rowvec(g.layer_norm(x), p(prefix + ".gain")), p(prefix + ".bias"));
}

// Scaled dot-product attention with separate Q/K/V/output projections.
// Output row i depends on key/value rows only as a set.
template <class Real>
typename Graph<Real>::Ref multi_head_attention(ParamRefs<Real>& p,
                                               typename Graph<Real>::Ref q_in,
                                               typename Graph<Real>::Ref kv_in,
                                               int heads,
                                               const std::string& prefix) {
    auto& g = p.graph();
    int d   = g.val(q_in).cols();
    if (g.val(kv_in).rows() == 0)
        throw std::invalid_argument("attention: empty key/value sequence");
    if (g.val(kv_in).cols() != d)
        throw std::invalid_argument("attention: kv width " + std::to_string(g.val(kv_in).cols()) +
                                    " vs query width " + std::to_string(d));
    if (d % heads)
        throw std::invalid_argument("attention: dim " + std::to_string(d) +
                                    " not divisible by heads " + std::to_string(heads));
    int dh = d / heads;

    auto Q = g.affine(q_in, p(prefix + ".wq"), p(prefix + ".bq"));
    auto K = g.affine(kv_in, p(prefix + ".wk"), p(prefix + ".bk"));
    auto V = g.affine(kv_in, p(prefix + ".wv"), p(prefix + ".bv"));

    std::vector<typename Graph<Real>::Ref> ctx;
    Real scale = (Real)(1.0 / std::sqrt((double)dh));
    for (int h = 0; h < heads; h++) {
        auto qh = g.slice_cols(Q, h * dh, (h + 1) * dh);
        auto kh = g.slice_cols(K, h * dh, (h + 1) * dh);
        auto vh = g.slice_cols(V, h * dh, (h + 1) * dh);
        ctx.push_back(g.mm(g.sdp_probs(qh, kh, scale), vh));
    }
    auto cat = heads == 1 ? ctx[0] : g.concat_cols(ctx);
    return g.affine(cat, p(prefix + ".wo"), p(prefix + ".bo"));
}

// Registers wq/bq/wk/bk/wv/bv/wo/bo under prefix. zero_out makes the output
// projection start at exact zero so the branch is neutral until trained.
template <class Real>
void add_attention_params(ParameterStoreT<Real>& store, const std::string& prefix, int d,
                          RngStream& rng, bool zero_out = false) {
    const double s = 0.02;
    store.add(prefix + ".wq", normal_init<Real>({d, d}, s, rng));
    store.add(prefix + ".bq", TensorT<Real>::zeros({d}));
    store.add(prefix + ".wk", normal_init<Real>({d, d}, s, rng));
    store.add(prefix + ".bk", TensorT<Real>::zeros({d}));
    store.add(prefix + ".wv", normal_init<Real>({d, d}, s, rng));
    store.add(prefix + ".bv", TensorT<Real>::zeros({d}));
    if (zero_out)
        store.add(prefix + ".wo", TensorT<Real>::zeros({d, d}));
    else
        store.add(prefix + ".wo", normal_init<Real>({d, d}, s, rng));
    store.add(prefix + ".bo", TensorT<Real>::zeros({d}));
}

template <class Real>
void add_linear_params(ParameterStoreT<Real>& store, const std::string& prefix, int in, int out,
                       RngStream& rng, bool zero = false) {
    if (zero)
        store.add(prefix + ".w", TensorT<Real>::zeros({in, out}));
    else
        store.add(prefix + ".w", normal_init<Real>({in, out}, 0.02, rng));
    store.add(prefix + ".b", TensorT<Real>::zeros({out}));
}

/*---------------------------------- AdamW -----------------------------------*/

struct AdamWConfig {
    double lr           = 1e-3;
    double beta1        = 0.9;
    double beta2        = 0.999;
    double eps          = 1e-8;
    double weight_decay = 0.0;
};

// First/second moments per parameter plus the shared step counter.
template <class Real>
class OptimStateT {
public:
    struct Moments {
        TensorT<Real> m, v;
    };

    AdamWConfig cfg;
    uint64_t step = 0;
    std::map<std::string, Moments> moments;

    // One decoupled-weight-decay Adam step over every trainable parameter
    // that received a gradient. Frozen parameters are never touched.
    void step_update(ParameterStoreT<Real>& store) {
        step++;
        double bc1 = 1.0 - std::pow(cfg.beta1, (double)step);
        double bc2 = 1.0 - std::pow(cfg.beta2, (double)step);
        for (auto& [name, p] : store) {
            if (!p.trainable || !p.grad.defined())
                continue;
            for (size_t i = 0; i < p.grad.size; i++)
                if (!std::isfinite((double)p.grad.data[i]))
                    throw NumericError("non-finite gradient in parameter " + name);
            auto [it, fresh] = moments.try_emplace(name);
            if (fresh) {
                it->second.m = TensorT<Real>::zeros(p.value.shape);
                it->second.v = TensorT<Real>::zeros(p.value.shape);
            }
            auto& mo = it->second;
            for (size_t i = 0; i < p.value.size; i++) {
                double gi = p.grad.data[i];
                double m  = cfg.beta1 * mo.m.data[i] + (1.0 - cfg.beta1) * gi;
                double v  = cfg.beta2 * mo.v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                mo.m.data[i] = (Real)m;
                mo.v.data[i] = (Real)v;
                double mhat  = m / bc1;
                double vhat  = v / bc2;
                double upd   = mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * (double)p.value.data[i];
                p.value.data[i] = (Real)((double)p.value.data[i] - cfg.lr * upd);
            }
        }
    }
};

using OptimState = OptimStateT<float>;

/*---------------------------- gradient verification ---------------------------*/

struct FdCoord {
    std::string name;
    size_t index;
};

// Central finite differences against the analytic gradient at chosen
// coordinates. loss_fn must rebuild the forward pass from the store's current
// values. The denominator floor keeps the relative test meaningful where the
// true gradient sits at the finite-difference noise floor (~1e-16/h); such
// coordinates are then effectively judged by absolute difference.
template <class Real>
double fd_check(ParameterStoreT<Real>& store,
                const std::function<double()>& loss_fn,
                const std::function<void()>& grad_fn,
                const std::vector<FdCoord>& coords,
                double h = 1e-5, double denom_floor = 1e-5) {
    store.zero_grads();
    grad_fn();
    double worst = 0;
    for (const auto& c : coords) {
        auto& p = store.get(c.name);
        if (c.index >= p.value.size)
            throw std::invalid_argument("fd coordinate out of range for " + c.name);
        double analytic = p.grad.defined() ? (double)p.grad.data[c.index] : 0.0;
        Real saved      = p.value.data[c.index];
        p.value.data[c.index] = (Real)((double)saved + h);
        double lp             = loss_fn();
        p.value.data[c.index] = (Real)((double)saved - h);
        double lm             = loss_fn();
        p.value.data[c.index] = saved;
        double fd             = (lp - lm) / (2.0 * h);
        double denom          = std::max({std::abs(fd), std::abs(analytic), denom_floor});
        worst                 = std::max(worst, std::abs(fd - analytic) / denom);
    }
    return worst;
}

// Overwrites every parameter (including zero-initialized ones) with noise;
// gradient checks need a generic point, not the training start.
template <class Real>
void randomize_store(ParameterStoreT<Real>& store, double stddev, RngStream& rng) {
    for (auto& [name, p] : store)
        for (size_t i = 0; i < p.value.size; i++)
            p.value.data[i] = (Real)(stddev * rng.next_gaussian());
}

// Draws coordinates uniformly over the trainable parameters of a store.
template <class Real>
std::vector<FdCoord> random_coords(ParameterStoreT<Real>& store, int count, RngStream& rng) {
    std::vector<std::string> names;
    for (auto& [name, p] : store)
        if (p.trainable && p.value.size > 0)
            names.push_back(name);
    if (names.empty())
        throw std::invalid_argument("random_coords: no trainable parameters");
    std::vector<FdCoord> out;
    for (int i = 0; i < count; i++) {
        const std::string& n = names[rng.next_below((uint32_t)names.size())];
        out.push_back({n, rng.next_below((uint32_t)store.get(n).value.size)});
    }
    return out;
}

}  // namespace refcolor

#endif
