#include <cmath>
#include <cstring>

#include "doctest.h"
#include "refcolor/nn.hpp"

using namespace refcolor;

namespace {

// straight-line multi-head attention oracle: separate projections, per-head
// scaled dot-product, softmax, concat, output projection
template <class Real>
TensorT<Real> mha_oracle(const TensorT<Real>& q_in, const TensorT<Real>& kv_in,
                         ParameterStoreT<Real>& s, const std::string& p, int heads) {
    auto proj = [&](const TensorT<Real>& x, const std::string& w, const std::string& b) {
        auto& W  = s.get(p + w).value;
        auto& B  = s.get(p + b).value;
        int R    = x.rows(), In = x.cols(), Out = W.cols();
        auto out = TensorT<Real>::zeros({R, Out});
        for (int i = 0; i < R; i++)
            for (int o = 0; o < Out; o++) {
                double acc = B.data[o];
                for (int k = 0; k < In; k++)
                    acc += (double)x.row(i)[k] * W.row(k)[o];
                out.row(i)[o] = (Real)acc;
            }
        return out;
    };
    auto Q = proj(q_in, ".wq", ".bq");
    auto K = proj(kv_in, ".wk", ".bk");
    auto V = proj(kv_in, ".wv", ".bv");
    int Lq = Q.rows(), Lk = K.rows(), d = Q.cols(), dh = d / heads;
    auto ctx = TensorT<Real>::zeros({Lq, d});
    for (int h = 0; h < heads; h++)
        for (int i = 0; i < Lq; i++) {
            std::vector<double> logits(Lk);
            double mx = -1e300;
            for (int j = 0; j < Lk; j++) {
                double dot = 0;
                for (int k = 0; k < dh; k++)
                    dot += (double)Q.row(i)[h * dh + k] * K.row(j)[h * dh + k];
                logits[j] = dot / std::sqrt((double)dh);
                mx        = std::max(mx, logits[j]);
            }
            double Z = 0;
            for (int j = 0; j < Lk; j++)
                Z += std::exp(logits[j] - mx);
            for (int j = 0; j < Lk; j++) {
                double w = std::exp(logits[j] - mx) / Z;
                for (int k = 0; k < dh; k++)
                    ctx.row(i)[h * dh + k] += (Real)(w * V.row(j)[h * dh + k]);
            }
        }
    return proj(ctx, ".wo", ".bo");
}

}  // namespace

TEST_CASE("linear with identity weights is the identity") {
    ParameterStore s;
    auto W = Tensor::zeros({4, 4});
    for (int i = 0; i < 4; i++)
        W.row(i)[i] = 1.0f;
    s.add("lin.w", std::move(W));
    s.add("lin.b", Tensor::zeros({4}));
    RngStream rng(1, "x");
    auto x = normal_init<float>({3, 4}, 1.0, rng);

    Graph<float> g;
    ParamRefs<float> pr(g, s);
    auto y = linear(pr, g.input(x), "lin");
    for (size_t i = 0; i < x.size; i++)
        CHECK(g.val(y).data[i] == x.data[i]);
}

TEST_CASE("linear rejects shape mismatch naming the dims") {
    ParameterStore s;
    RngStream rng(1, "w");
    add_linear_params(s, "lin", 5, 3, rng);
    Graph<float> g;
    ParamRefs<float> pr(g, s);
    auto x = g.input(Tensor::zeros({2, 4}));
    CHECK_THROWS_WITH_AS(linear(pr, x, "lin"), doctest::Contains("[2,4]"), std::invalid_argument);
}

TEST_CASE("softmax over a single element is exactly one") {
    Graph<float> g;
    auto y = g.softmax_rows(g.input(Tensor::from({1, 1}, {3.7f})));
    CHECK(g.val(y).data[0] == 1.0f);
}

TEST_CASE("layer_norm of a constant vector is zero pre-affine") {
    Graph<float> g;
    auto y = g.layer_norm(g.input(Tensor::full({2, 8}, 0.37f)));
    for (size_t i = 0; i < g.val(y).size; i++)
        CHECK(std::fabs(g.val(y).data[i]) < 1e-9);
}

TEST_CASE("attention with a single key/value row ignores query content") {
    ParameterStore s;
    RngStream rng(3, "init");
    add_attention_params(s, "attn", 8, rng);
    auto kv = normal_init<float>({1, 8}, 1.0, rng);

    auto run = [&](float qscale) {
        Graph<float> g;
        ParamRefs<float> pr(g, s);
        auto q = normal_init<float>({4, 8}, 1.0, rng);
        for (size_t i = 0; i < q.size; i++)
            q.data[i] *= qscale;
        return g.val(multi_head_attention(pr, g.input(q), g.input(kv), 2, "attn")).clone();
    };
    auto a = run(1.0f);
    auto b = run(100.0f);  // weights are exactly 1 either way
    for (size_t i = 0; i < a.size; i++) {
        CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-6));
        CHECK(a.data[i] == doctest::Approx(a.data[0 % 8 + (i % 8)]).epsilon(1e-6));  // rows identical
    }
}

TEST_CASE("attention matches the straight-line oracle") {
    ParameterStore s;
    RngStream rng(11, "init");
    add_attention_params(s, "attn", 8, rng);
    auto q  = normal_init<float>({4, 8}, 1.0, rng);
    auto kv = normal_init<float>({6, 8}, 1.0, rng);

    Graph<float> g;
    ParamRefs<float> pr(g, s);
    auto out    = multi_head_attention(pr, g.input(q), g.input(kv), 2, "attn");
    auto oracle = mha_oracle(q, kv, s, "attn", 2);
    for (size_t i = 0; i < oracle.size; i++)
        CHECK(g.val(out).data[i] == doctest::Approx(oracle.data[i]).epsilon(1e-6));
}

TEST_CASE("attention key/value permutation leaves outputs unchanged") {
    ParameterStore s;
    RngStream rng(12, "init");
    add_attention_params(s, "attn", 16, rng);
    auto q  = normal_init<float>({5, 16}, 1.0, rng);
    auto kv = normal_init<float>({9, 16}, 1.0, rng);

    auto run = [&](const std::vector<int>& order) {
        Graph<float> g;
        ParamRefs<float> pr(g, s);
        auto kvr = g.embed_rows(g.input(kv), order);
        return g.val(multi_head_attention(pr, g.input(q), kvr, 4, "attn")).clone();
    };
    auto a = run({0, 1, 2, 3, 4, 5, 6, 7, 8});
    auto b = run({8, 2, 5, 0, 7, 1, 3, 6, 4});
    for (size_t i = 0; i < a.size; i++)
        CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-6));
}

TEST_CASE("attention rejects an empty key/value set") {
    ParameterStore s;
    RngStream rng(13, "init");
    add_attention_params(s, "attn", 8, rng);
    Graph<float> g;
    ParamRefs<float> pr(g, s);
    auto q  = g.input(Tensor::zeros({2, 8}));
    auto kv = g.input(Tensor::zeros({0, 8}));
    CHECK_THROWS_AS(multi_head_attention(pr, q, kv, 2, "attn"), std::invalid_argument);
}

TEST_CASE("backward of sum(x W) has the outer-product gradient") {
    ParameterStoreD s;
    RngStream rng(21, "init");
    s.add("w", normal_init<double>({3, 2}, 1.0, rng));
    auto x = normal_init<double>({4, 3}, 1.0, rng);

    Graph<double> g;
    ParamRefs<double> pr(g, s);
    g.backward(g.sum_all(g.mm(g.input(x), pr("w"))));
    // dL/dW[k,o] = sum_i x[i,k]
    auto& grad = s.get("w").grad;
    for (int k = 0; k < 3; k++) {
        double colsum = 0;
        for (int i = 0; i < 4; i++)
            colsum += x.row(i)[k];
        for (int o = 0; o < 2; o++)
            CHECK(grad.row(k)[o] == doctest::Approx(colsum).epsilon(1e-12));
    }
}

TEST_CASE("parameters not on the loss path get no gradient") {
    ParameterStoreD s;
    RngStream rng(22, "init");
    s.add("used", normal_init<double>({2, 2}, 1.0, rng));
    s.add("unused", normal_init<double>({2, 2}, 1.0, rng));
    Graph<double> g;
    ParamRefs<double> pr(g, s);
    g.backward(g.sum_all(pr("used")));
    CHECK(s.get("used").grad.defined());
    CHECK_FALSE(s.get("unused").grad.defined());
}

TEST_CASE("backward rejects a non-scalar loss") {
    Graph<float> g;
    auto x = g.input(Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
}

TEST_CASE("adamw single step matches the hand-computed update") {
    ParameterStore s;
    s.add("p", Tensor::scalar(1.0f));
    s.get("p").grad = Tensor::scalar(1.0f);
    OptimState opt;
    opt.cfg.lr = 0.1;
    opt.step_update(s);
    // bias-corrected mhat = 1, vhat = 1 -> p = 1 - 0.1 * 1/(1 + eps)
    CHECK(s.get("p").value.data[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adamw leaves parameters alone on zero gradient and zero decay") {
    ParameterStore s;
    s.add("p", Tensor::scalar(2.5f));
    s.get("p").grad = Tensor::scalar(0.0f);
    OptimState opt;
    opt.step_update(s);
    CHECK(s.get("p").value.data[0] == 2.5f);
}

TEST_CASE("adamw never touches frozen parameters") {
    ParameterStore s;
    s.add("p", Tensor::scalar(2.5f), /*trainable=*/false);
    s.get("p").grad = Tensor::scalar(7.0f);
    OptimState opt;
    opt.step_update(s);
    CHECK(s.get("p").value.data[0] == 2.5f);
}

TEST_CASE("adamw aborts on a non-finite gradient naming the parameter") {
    ParameterStore s;
    s.add("model.bad", Tensor::scalar(1.0f));
    s.get("model.bad").grad = Tensor::scalar(std::nanf(""));
    OptimState opt;
    CHECK_THROWS_WITH_AS(opt.step_update(s), doctest::Contains("model.bad"), NumericError);
}

TEST_CASE("parameter store iterates lexicographically and rejects duplicates") {
    ParameterStore s;
    s.add("b", Tensor::scalar(1));
    s.add("a.z", Tensor::scalar(1));
    s.add("a.a", Tensor::scalar(1));
    std::vector<std::string> names;
    for (auto& [n, p] : s)
        names.push_back(n);
    CHECK(names == std::vector<std::string>{"a.a", "a.z", "b"});
    CHECK_THROWS_AS(s.add("b", Tensor::scalar(2)), std::invalid_argument);
}

TEST_CASE("gemm variants agree with a naive triple loop") {
    RngStream rng(31, "gemm");
    int M = 7, K = 13, N = 9;
    auto A = normal_init<float>({M, K}, 1.0, rng);
    auto B = normal_init<float>({K, N}, 1.0, rng);
    auto C = Tensor::zeros({M, N});
    gemm_nn(A.data, B.data, C.data, M, K, N);
    for (int i = 0; i < M; i++)
        for (int j = 0; j < N; j++) {
            double acc = 0;
            for (int k = 0; k < K; k++)
                acc += (double)A.row(i)[k] * B.row(k)[j];
            CHECK(C.row(i)[j] == doctest::Approx(acc).epsilon(1e-5));
        }

    auto Bt = Tensor::zeros({N, K});
    transpose_copy(B.data, Bt.data, K, N);
    auto C2 = Tensor::zeros({M, N});
    gemm_nt(A.data, Bt.data, C2.data, M, K, N);
    auto At = Tensor::zeros({K, M});
    transpose_copy(A.data, At.data, M, K);
    auto C3 = Tensor::zeros({M, N});
    gemm_tn(At.data, B.data, C3.data, M, K, N);
    for (size_t i = 0; i < C.size; i++) {
        CHECK(C2.data[i] == doctest::Approx(C.data[i]).epsilon(1e-6));
        CHECK(C3.data[i] == doctest::Approx(C.data[i]).epsilon(1e-6));
    }
}

TEST_CASE("counter rng streams are independent and replayable") {
    RngStream a1(42, "alpha"), a2(42, "alpha"), b(42, "beta");
    CHECK(a1.next_u64() == a2.next_u64());
    CHECK(a1.next_u64() != b.next_u64());
    a1.set_counter(0);
    a2.set_counter(0);
    for (int i = 0; i < 100; i++)
        CHECK(a1.next_gaussian() == a2.next_gaussian());
}
