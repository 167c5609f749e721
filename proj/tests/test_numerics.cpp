#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "testutil.hpp"
#include "ts/conv_ops.hpp"

using namespace ts;
using namespace ts::nn;

namespace {

TensorD rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(std::move(s));
    t.fill_uniform(rng, lo, hi);
    return t;
}

// Scalarize an op output against fixed random weights so every output element
// contributes its own gradient path.
VarT<double> pin(const VarT<double>& v, uint64_t seed = 99) {
    Rng rng(seed);
    TensorD w(v->value.shape);
    w.fill_uniform(rng, -1.0, 1.0);
    return sum_all(mul(v, constant(std::move(w))));
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor t(Shape{2, 3}, 1.5f);
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), ContractError);
    CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<float>(5)), ContractError);
    CHECK(t.reshaped({3, 2}).shape == Shape{3, 2});
    CHECK_THROWS_AS(t.reshaped({4, 2}), ContractError);
}

TEST_CASE("softmax examples and properties") {
    // single-element axis -> 1.0
    TensorD one(Shape{1}, 3.7);
    CHECK(softmax(one, 0).data[0] == doctest::Approx(1.0));

    // [0,0] -> [0.5,0.5]
    TensorD two(Shape{2}, 0.0);
    auto s = softmax(two, 0);
    CHECK(s.data[0] == doctest::Approx(0.5));
    CHECK(s.data[1] == doctest::Approx(0.5));

    // [1000,1000] -> [0.5,0.5] without overflow
    TensorD big(Shape{2}, 1000.0);
    auto sb = softmax(big, 0);
    CHECK(sb.all_finite());
    CHECK(sb.data[0] == doctest::Approx(0.5));

    // sums to 1 along the reduced axis for every axis, extreme magnitudes
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        TensorD x(Shape{3, 4, 5});
        double scale = (trial % 2) ? 700.0 : 1.0;
        x.fill_uniform(rng, -scale, scale);
        for (int axis = 0; axis < 3; ++axis) {
            auto y = softmax(x, axis);
            REQUIRE(y.all_finite());
            int64_t axis_len = x.shape[axis];
            int64_t inner = 1;
            for (int i = axis + 1; i < 3; ++i) inner *= x.shape[i];
            int64_t outer = x.numel() / (axis_len * inner);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    double sum = 0;
                    for (int64_t a = 0; a < axis_len; ++a)
                        sum += y.data[o * axis_len * inner + a * inner + in];
                    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
                }
        }
    }
}

TEST_CASE("adam: zero gradient is the identity") {
    Rng rng(5);
    TensorT<float> p(Shape{3, 4});
    p.fill_normal(rng, 0.0, 1.0);
    TensorT<float> orig = p;
    TensorT<float> g(Shape{3, 4}, 0.0f);
    AdamState<float> st;
    for (int i = 0; i < 5; ++i) adam_step<float>({&p}, {&g}, st);
    CHECK(st.step == 5);
    for (int64_t i = 0; i < p.numel(); ++i) CHECK(p.data[i] == orig.data[i]);
}

TEST_CASE("adam: first step moves by about -lr for unit gradient") {
    TensorT<double> p(Shape{1}, 0.25);
    TensorT<double> g(Shape{1}, 1.0);
    AdamState<double> st(AdamConfig{1e-3, 0.9, 0.999, 1e-8});
    adam_step<double>({&p}, {&g}, st);
    CHECK(std::abs(p.data[0] - (0.25 - 1e-3)) < 1e-6);
}

TEST_CASE("adam: three steps on a scalar quadratic match the hand simulation") {
    // loss = x^2, grad = 2x
    double x = 1.7;
    TensorT<double> p(Shape{1}, x);
    AdamState<double> st(AdamConfig{0.05, 0.9, 0.999, 1e-8});
    tsu::ScalarAdamSim sim{0.05, 0.9, 0.999, 1e-8};
    double xs = x;
    for (int i = 0; i < 3; ++i) {
        TensorT<double> g(Shape{1}, 2.0 * p.data[0]);
        double gs = 2.0 * xs;
        adam_step<double>({&p}, {&g}, st);
        xs = sim.update(xs, gs);
        CHECK(p.data[0] == doctest::Approx(xs).epsilon(1e-12));
    }
    CHECK(st.step == 3);
}

TEST_CASE("adam: shape mismatch is an error") {
    TensorT<float> p(Shape{2});
    TensorT<float> g(Shape{3});
    AdamState<float> st;
    CHECK_THROWS_AS((adam_step<float>({&p}, {&g}, st)), ContractError);
}

TEST_CASE("grad: sum gives all-ones, zero-scaled loss gives zeros") {
    Rng rng(3);
    auto p = parameter(rand_tensor({4, 5}, rng));
    auto loss = sum_all(p);
    backward(loss);
    for (auto v : p->grad.data) CHECK(v == 1.0);

    p->zero_grad();
    auto zero_loss = sum_all(smul(p, 0.0));
    backward(zero_loss);
    REQUIRE(p->has_grad());
    for (auto v : p->grad.data) CHECK(v == 0.0);
}

TEST_CASE("grad: non-scalar loss is a contract violation") {
    Rng rng(3);
    auto p = parameter(rand_tensor({4}, rng));
    auto y = relu(p);
    CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("grad: random 3-layer composition matches finite differences") {
    Rng rng(17);
    auto w1 = parameter(rand_tensor({6, 8}, rng));
    auto b1 = parameter(rand_tensor({8}, rng));
    auto w2 = parameter(rand_tensor({8, 8}, rng));
    auto w3 = parameter(rand_tensor({8, 3}, rng));
    TensorD xin = rand_tensor({5, 6}, rng);
    auto make_loss = [&]() {
        auto x = constant(xin);
        auto h1 = tanh_op(linear(x, w1, b1));
        auto h2 = gelu(linear(h1, w2));
        auto out = sigmoid(linear(h2, w3));
        return pin(out, 42);
    };
    double err = tsu::max_grad_rel_err<double>({w1, b1, w2, w3}, make_loss, 1e-5);
    CHECK(err < 1e-5);
}

TEST_CASE("grad: every primitive matches finite differences") {
    Rng rng(23);
    auto check = [&](const char* name, std::vector<VarT<double>> params,
                     std::function<VarT<double>()> make_loss) {
        double err = tsu::max_grad_rel_err<double>(params, make_loss, 1e-5);
        INFO("primitive: " << name);
        CHECK(err < 1e-5);
    };

    {
        auto a = parameter(rand_tensor({3, 4}, rng));
        auto b = parameter(rand_tensor({3, 4}, rng));
        check("add", {a, b}, [=] { return pin(add(a, b)); });
        check("sub", {a, b}, [=] { return pin(sub(a, b)); });
        check("mul", {a, b}, [=] { return pin(mul(a, b)); });
    }
    {
        auto a = parameter(rand_tensor({3, 4}, rng));
        auto bias = parameter(rand_tensor({4}, rng));
        check("add_bias_broadcast", {a, bias}, [=] { return pin(add(a, bias)); });
        auto s = parameter(rand_tensor({1}, rng));
        auto sc = reshape(s, Shape{});
        check("add_scalar_broadcast", {a, s}, [=] { return pin(add(a, reshape(s, Shape{}))); });
        check("affine", {a}, [=] { return pin(affine(a, 2.5, -0.75)); });
    }
    {
        // keep relu inputs away from the kink
        TensorD raw = rand_tensor({4, 4}, rng);
        for (auto& v : raw.data)
            if (std::abs(v) < 0.05) v += (v >= 0 ? 0.1 : -0.1);
        auto a = parameter(raw);
        check("relu", {a}, [=] { return pin(relu(a)); });
        check("gelu", {a}, [=] { return pin(gelu(a)); });
        check("sigmoid", {a}, [=] { return pin(sigmoid(a)); });
        check("tanh", {a}, [=] { return pin(tanh_op(a)); });
        // keep clamp inputs away from the clamp boundaries
        check("clamp", {a}, [=] { return pin(clampv(a, -2.0, 2.0)); });
    }
    {
        auto a = parameter(rand_tensor({3, 3}, rng, 0.1, 2.0));
        check("log", {a}, [=] { return pin(logv(a)); });
    }
    {
        auto a = parameter(rand_tensor({3, 5}, rng));
        auto b = parameter(rand_tensor({5, 4}, rng));
        check("matmul", {a, b}, [=] { return pin(matmul(a, b)); });
        auto bias = parameter(rand_tensor({4}, rng));
        check("linear", {a, b, bias}, [=] { return pin(linear(a, b, bias)); });
    }
    {
        auto x3 = parameter(rand_tensor({2, 3, 5}, rng));
        auto w = parameter(rand_tensor({5, 4}, rng));
        check("linear_batched", {x3, w}, [=] { return pin(linear(x3, w)); });
    }
    {
        auto a = parameter(rand_tensor({2, 3, 4}, rng));
        auto b = parameter(rand_tensor({2, 4, 5}, rng));
        check("bmm", {a, b}, [=] { return pin(bmm(a, b)); });
        auto bt = parameter(rand_tensor({2, 5, 4}, rng));
        check("bmm_transb", {a, bt}, [=] { return pin(bmm(a, bt, true)); });
    }
    {
        auto a = parameter(rand_tensor({2, 6}, rng));
        check("reshape", {a}, [=] { return pin(reshape(a, {3, 4})); });
        check("slice_last", {a}, [=] { return pin(slice_last(a, 1, 3)); });
        auto b = parameter(rand_tensor({2, 3}, rng));
        check("concat_last", {a, b},
              [=] { return pin(concat_last<double>({a, b})); });
    }
    {
        auto a = parameter(rand_tensor({2, 4, 3}, rng));
        check("select_token", {a}, [=] { return pin(select_token(a, 2)); });
        auto cls = parameter(rand_tensor({3}, rng));
        check("prepend_token", {a, cls}, [=] { return pin(prepend_token(a, cls)); });
    }
    {
        auto table = parameter(rand_tensor({6, 4}, rng));
        std::vector<int64_t> idx{0, 5, 2, 2, 1, 3};
        check("gather_rows", {table},
              [=] { return pin(gather_rows(table, idx, Shape{2, 3})); });
    }
    {
        auto a = parameter(rand_tensor({3, 5}, rng));
        check("softmax_last", {a}, [=] { return pin(softmax_last(a)); });
        auto gamma = parameter(rand_tensor({5}, rng, 0.5, 1.5));
        auto beta = parameter(rand_tensor({5}, rng));
        check("layer_norm", {a, gamma, beta},
              [=] { return pin(layer_norm(a, gamma, beta)); });
    }
    {
        auto a = parameter(rand_tensor({4, 6}, rng));
        check("dropout", {a}, [=] {
            Rng drng(777);  // fixed stream so the mask repeats across FD evals
            return pin(dropout(a, 0.3, drng, true));
        });
    }
    {
        auto x = parameter(rand_tensor({2, 3, 6, 6}, rng));
        auto w = parameter(rand_tensor({4, 3, 3, 3}, rng, -0.5, 0.5));
        auto b = parameter(rand_tensor({4}, rng));
        check("conv2d", {x, w, b}, [=] { return pin(conv2d(x, w, b, 1, 1)); });
        check("conv2d_stride2", {x, w, b}, [=] { return pin(conv2d(x, w, b, 2, 1)); });
    }
    {
        // well-separated values so the argmax is stable under perturbation
        TensorD raw(Shape{1, 2, 6, 6});
        Rng prng(31);
        std::vector<double> vals;
        for (int64_t i = 0; i < raw.numel(); ++i) vals.push_back(i * 0.37);
        prng.shuffle(vals);
        raw.data.assign(vals.begin(), vals.end());
        auto x = parameter(raw);
        check("maxpool2d", {x}, [=] { return pin(maxpool2d(x, 3, 2, 1)); });
        check("global_avgpool", {x}, [=] { return pin(global_avgpool(x)); });
        check("upsample2", {x}, [=] { return pin(upsample2(x)); });
    }
    {
        auto x = parameter(rand_tensor({3, 2, 4, 4}, rng));
        auto gamma = parameter(rand_tensor({2}, rng, 0.5, 1.5));
        auto beta = parameter(rand_tensor({2}, rng));
        check("batchnorm2d_train", {x, gamma, beta},
              [=] { return pin(batchnorm2d<double>(x, gamma, beta, nullptr, true)); });
        auto stats = std::make_shared<BnStats<double>>(2);
        stats->mean.fill_uniform(rng, -0.3, 0.3);
        stats->var.fill_uniform(rng, 0.5, 1.5);
        check("batchnorm2d_eval", {x, gamma, beta}, [=] {
            return pin(batchnorm2d<double>(x, gamma, beta, stats.get(), false));
        });
    }
    {
        auto a = parameter(rand_tensor({3, 4}, rng));
        TensorD target = rand_tensor({3, 4}, rng);
        check("mse_loss", {a}, [=] { return mse_loss(a, target); });
        check("sum_all", {a}, [=] { return sum_all(a); });
        check("mean_all", {a}, [=] { return mean_all(a); });
    }
}

TEST_CASE("ops are deterministic given identical inputs and seed") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        auto w = parameter(rand_tensor({8, 8}, rng));
        auto x = constant(rand_tensor({4, 8}, rng));
        Rng drop_rng(seed + 1);
        auto y = dropout(gelu(linear(x, w)), 0.2, drop_rng, true);
        return sum_all(y)->value.data[0];
    };
    CHECK(run(12) == run(12));
    CHECK(run(12) != run(13));
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    Rng rng(41);
    ParamSet<float> ps;
    {
        Tensor a(Shape{3, 4});
        a.fill_normal(rng, 0.0, 1.0);
        ps.add("layer0.w", std::move(a));
    }
    {
        Tensor b(Shape{7});
        b.fill_normal(rng, 0.0, 0.1);
        ps.add("layer0.b", std::move(b));
    }
    CHECK_THROWS_AS(ps.add("layer0.b", Tensor(Shape{1})), ContractError);

    auto ck = Checkpoint::from_params(ps, R"({"kind":"test","epochs":3})");
    std::string bytes = ck.serialize();
    auto ck2 = Checkpoint::deserialize(bytes);
    CHECK(ck2.config_json == ck.config_json);
    CHECK(ck2.serialize() == bytes);

    ParamSet<float> ps2;
    ps2.add("layer0.w", Tensor(Shape{3, 4}, 0.0f));
    ps2.add("layer0.b", Tensor(Shape{7}, 0.0f));
    ck2.into_params(ps2);
    for (size_t i = 0; i < ps.items.size(); ++i) {
        auto& a = ps.items[i].second->value;
        auto& b = ps2.items[i].second->value;
        REQUIRE(a.shape == b.shape);
        for (int64_t j = 0; j < a.numel(); ++j) CHECK(a.data[j] == b.data[j]);
    }

    CHECK_THROWS_AS(Checkpoint::deserialize("NOPE"), DataError);
    std::string truncated = bytes.substr(0, bytes.size() - 3);
    CHECK_THROWS_AS(Checkpoint::deserialize(truncated), DataError);
}
