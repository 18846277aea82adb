#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "peftdml/peft.hpp"

using namespace peftdml;

TEST_CASE("lora_wrap init identity and parameter counts") {
    ParameterSet ps;
    LinearLayer base = make_linear(ps, "enc.l1", 64, 64, 1);
    LoRALinear lora = lora_wrap(ps, base, 8, 16.0, 2);

    // B = 0 at init, so the wrapped layer equals the base exactly
    Rng rng(3);
    Tensor x = Tensor::of({4, 64}, oracles::random_vec(rng, 4 * 64));
    CHECK(lora.forward(x).data() == lora.base.forward(x).data());

    // 8 * (64 + 64) = 1024 trainable over 64*64 + 64 = 4160 frozen
    auto report = trainability_report(ps);
    CHECK(report.trainable == 1024);
    CHECK(report.total - report.trainable == 4160);
    CHECK(ps.is_frozen("enc.l1.W"));
    CHECK(ps.is_frozen("enc.l1.b"));
    CHECK_FALSE(ps.is_frozen("enc.l1.lora.A"));

    ParameterSet ps2;
    LinearLayer base2 = make_linear(ps2, "enc.l1", 8, 8, 1);
    CHECK_THROWS_AS(lora_wrap(ps2, base2, 0, 1.0, 2), ConfigError);
    CHECK_THROWS_AS(lora_wrap(ps2, base2, 9, 18.0, 2), ConfigError);
}

TEST_CASE("lora_forward hand case and gradient routing") {
    ParameterSet ps;
    LinearLayer base = make_linear(ps, "l", 1, 1, 1);
    base.W.data()[0] = 2.0;
    base.b.data()[0] = 0.0;
    LoRALinear lora = lora_wrap(ps, base, 1, 1.0, 2);
    lora.A.data()[0] = 1.0;
    lora.B.data()[0] = 3.0;

    Tensor x = Tensor::of({1, 1}, {5.0});
    Tensor y = lora.forward(x);
    CHECK(y.data()[0] == doctest::Approx(25.0));  // 2*5 + (1/1)*3*1*5

    backward(sum(y));
    CHECK_FALSE(lora.base.W.has_grad());  // frozen base: gradient absent
    CHECK_FALSE(lora.base.b.has_grad());
    REQUIRE(lora.A.has_grad());
    REQUIRE(lora.B.has_grad());
    CHECK(lora.A.grad()[0] == doctest::Approx(15.0));  // d/dA [A*B*x] = B*x
    CHECK(lora.B.grad()[0] == doctest::Approx(5.0));

    CHECK_THROWS_AS(lora.forward(Tensor::of({1, 2}, {1.0, 2.0})), ShapeError);
}

TEST_CASE("lora gradients match finite differences") {
    ParameterSet ps;
    LinearLayer base = make_linear(ps, "l", 6, 5, 11);
    LoRALinear lora = lora_wrap(ps, base, 3, 6.0, 12);
    Rng rng(13);
    for (auto& v : lora.B.data()) v = rng.normal(0, 0.3);  // move off the zero init
    Tensor x = Tensor::of({3, 6}, oracles::random_vec(rng, 18));
    Tensor w = Tensor::of({3, 5}, oracles::random_vec(rng, 15));

    auto objective = [&] { return sum(mul(lora.forward(x), w)); };
    backward(objective());
    for (Tensor* leaf : {&lora.A, &lora.B}) {
        auto analytic = leaf->grad();
        auto fd = oracles::fd_gradient([&] { return objective().item(); }, *leaf);
        CHECK(oracles::max_rel_err(analytic, fd) < 1e-4);
    }
}

TEST_CASE("merge_lora equivalence") {
    SUBCASE("zero B merges to the base bitwise") {
        ParameterSet ps;
        LinearLayer base = make_linear(ps, "l", 5, 4, 7);
        LoRALinear lora = lora_wrap(ps, base, 2, 4.0, 8);
        LinearLayer merged = merge_lora(lora);
        CHECK(merged.W.data() == lora.base.W.data());
        CHECK(merged.b.data() == lora.base.b.data());
    }
    SUBCASE("random 8x8 rank 2 agrees within 1e-9 over 100 inputs") {
        ParameterSet ps;
        LinearLayer base = make_linear(ps, "l", 8, 8, 21);
        LoRALinear lora = lora_wrap(ps, base, 2, 4.0, 22);
        Rng rng(23);
        for (auto& v : lora.B.data()) v = rng.normal(0, 0.5);
        LinearLayer merged = merge_lora(lora);
        for (int trial = 0; trial < 100; ++trial) {
            Tensor x = Tensor::of({1, 8}, oracles::random_vec(rng, 8));
            auto a = lora.forward(x).data();
            auto b = merged.forward(x).data();
            for (size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-9);
        }
    }
    SUBCASE("merge is idempotent on the produced layer") {
        ParameterSet ps;
        LinearLayer base = make_linear(ps, "l", 6, 6, 31);
        LoRALinear lora = lora_wrap(ps, base, 4, 8.0, 32);
        Rng rng(33);
        for (auto& v : lora.B.data()) v = rng.normal(0, 0.5);
        LinearLayer m1 = merge_lora(lora);
        LinearLayer m2 = merge_lora(lora);
        CHECK(m1.W.data() == m2.W.data());
        CHECK(m1.b.data() == m2.b.data());
    }
    SUBCASE("merge equivalence across ranks") {
        Rng rng(41);
        for (int rank : {1, 4, 8, 16}) {
            ParameterSet ps;
            LinearLayer base = make_linear(ps, "l", 16, 16, 100 + rank);
            LoRALinear lora = lora_wrap(ps, base, rank, 2.0 * rank, 200 + rank);
            for (auto& v : lora.B.data()) v = rng.normal(0, 0.4);
            LinearLayer merged = merge_lora(lora);
            for (int trial = 0; trial < 25; ++trial) {
                Tensor x = Tensor::of({2, 16}, oracles::random_vec(rng, 32));
                auto a = lora.forward(x).data();
                auto b = merged.forward(x).data();
                for (size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-9);
            }
        }
    }
}

TEST_CASE("adapter_forward") {
    SUBCASE("identity at initialization") {
        ParameterSet ps;
        AdapterBlock block = make_adapter(ps, "enc.l1.adapter", 6, 3, 5);
        Rng rng(6);
        Tensor x = Tensor::of({4, 6}, oracles::random_vec(rng, 24));
        CHECK(block.forward(x).data() == x.data());
    }
    SUBCASE("hand evaluation with identity projections") {
        ParameterSet ps;
        AdapterBlock block = make_adapter(ps, "a", 2, 2, 5);
        block.down_w.data() = {1, 0, 0, 1};
        block.up_w.data() = {1, 0, 0, 1};
        Tensor x = Tensor::of({1, 2}, {-1.0, 2.0});
        auto y = block.forward(x).data();
        CHECK(y[0] == doctest::Approx(-1.0));  // x + relu(x): [-1,2] + [0,2]
        CHECK(y[1] == doctest::Approx(4.0));
    }
    SUBCASE("gradient reaches the adapter but not frozen surroundings") {
        ParameterSet ps;
        LinearLayer enc = make_linear(ps, "enc.l1", 4, 4, 1);
        ps.freeze_prefix("enc.");
        AdapterBlock block = make_adapter(ps, "enc.l1.adapter", 4, 2, 2);
        Rng rng(7);
        for (auto& v : block.up_w.data()) v = rng.normal(0, 0.2);
        Tensor x = Tensor::of({2, 4}, oracles::random_vec(rng, 8));
        backward(sum(block.forward(enc.forward(x))));
        CHECK_FALSE(enc.W.has_grad());
        CHECK(block.down_w.has_grad());
        CHECK(block.up_w.has_grad());
    }
    SUBCASE("adapter gradients match finite differences") {
        ParameterSet ps;
        AdapterBlock block = make_adapter(ps, "a", 5, 2, 9);
        Rng rng(10);
        for (auto& v : block.up_w.data()) v = rng.normal(0, 0.3);
        Tensor x = Tensor::of({3, 5}, oracles::random_vec(rng, 15));
        Tensor w = Tensor::of({3, 5}, oracles::random_vec(rng, 15));
        auto objective = [&] { return sum(mul(block.forward(x), w)); };
        backward(objective());
        for (Tensor* leaf : {&block.down_w, &block.up_w}) {
            auto analytic = leaf->grad();
            auto fd = oracles::fd_gradient([&] { return objective().item(); }, *leaf);
            CHECK(oracles::max_rel_err(analytic, fd) < 1e-4);
        }
    }
}

TEST_CASE("trainability_report edges") {
    ParameterSet ps;
    make_linear(ps, "enc.a", 4, 4, 1);
    make_linear(ps, "enc.b", 4, 4, 2);
    auto all_trainable = trainability_report(ps);
    CHECK(all_trainable.fraction == 1.0);
    ps.freeze_prefix("enc.");
    auto all_frozen = trainability_report(ps);
    CHECK(all_frozen.fraction == 0.0);
    CHECK(all_frozen.total == 2 * (16 + 4));
}

TEST_CASE("trainable fraction monotone in rank") {
    auto fraction_at = [](int rank) {
        ParameterSet ps;
        LinearLayer l1 = make_linear(ps, "enc.l1", 24, 64, 1);
        LinearLayer l2 = make_linear(ps, "enc.l2", 64, 64, 2);
        lora_wrap(ps, l1, rank, 2.0 * rank, 3);
        lora_wrap(ps, l2, rank, 2.0 * rank, 4);
        make_adapter(ps, "enc.l1.adapter", 64, 8, 5);
        make_adapter(ps, "enc.l2.adapter", 64, 8, 6);
        return trainability_report(ps).fraction;
    };
    double prev = -1.0;
    for (int rank : {1, 4, 8, 16}) {
        const double f = fraction_at(rank);
        CHECK(f > prev);
        prev = f;
    }
}

TEST_CASE("frozen paths bitwise stable under optimizer traffic") {
    ParameterSet ps;
    LinearLayer base = make_linear(ps, "enc.l1", 6, 6, 51);
    LoRALinear lora = lora_wrap(ps, base, 2, 4.0, 52);
    AdapterBlock block = make_adapter(ps, "enc.l1.adapter", 6, 3, 53);
    const auto w_before = lora.base.W.data();
    const auto b_before = lora.base.b.data();

    Rng rng(54);
    OptimizerState state;
    Tensor x = Tensor::of({4, 6}, oracles::random_vec(rng, 24));
    for (int step = 0; step < 20; ++step) {
        ps.clear_grads();
        Tensor y = block.forward(lora.forward(x));
        backward(mean(square(y)));
        optimizer_step(ps, collect_grads(ps), state);
    }
    CHECK(lora.base.W.data() == w_before);
    CHECK(lora.base.b.data() == b_before);
}
