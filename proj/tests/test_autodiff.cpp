#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "rgtn/random.hpp"
#include "rgtn/tape.hpp"
#include "rgtn/tensor.hpp"

using namespace rgtn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[static_cast<std::size_t>(i)] = rng.uniform(lo, hi);
    return t;
}

std::vector<double> flatten(const std::vector<Tensor>& ts) {
    std::vector<double> x;
    for (const auto& t : ts) x.insert(x.end(), t.vec().begin(), t.vec().end());
    return x;
}

std::vector<Tensor> unflatten(const std::vector<double>& x, const std::vector<Tensor>& like) {
    std::vector<Tensor> out;
    std::size_t off = 0;
    for (const auto& t : like) {
        std::vector<double> data(x.begin() + static_cast<std::ptrdiff_t>(off),
                                 x.begin() + static_cast<std::ptrdiff_t>(off + t.vec().size()));
        out.emplace_back(t.shape(), std::move(data));
        off += t.vec().size();
    }
    return out;
}

using Builder = std::function<Var(Tape&, std::vector<Var>&)>;

// Runs the builder, contracts its output against a fixed random cotangent so
// the loss is scalar, and compares analytic gradients of all inputs against
// central finite differences.
void check_gradients(const std::vector<Tensor>& inputs, const Builder& build,
                     std::uint64_t seed, double tol = 1e-4) {
    Rng wgen(derive_seed(seed, "cotangent"));
    Tensor cotangent;

    auto eval = [&](const std::vector<double>& x) -> double {
        std::vector<Tensor> ts = unflatten(x, inputs);
        Tape tape;
        std::vector<Var> vars;
        for (const auto& t : ts) vars.push_back(tape.leaf(t, true));
        Var out = build(tape, vars);
        Var w = tape.leaf(cotangent, false);
        Var loss = tape.sum_all(tape.mul(out, w));
        return tape.val(loss)[0];
    };

    // size the cotangent from a probe run
    {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
        Var out = build(tape, vars);
        cotangent = random_tensor(tape.shape_of(out), wgen, -1.0, 1.0);
    }

    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    Var out = build(tape, vars);
    Var w = tape.leaf(cotangent, false);
    Var loss = tape.sum_all(tape.mul(out, w));
    tape.backward(loss);

    std::vector<Tensor> grads;
    for (Var v : vars) grads.push_back(tape.grad_tensor(v));
    std::vector<double> analytic = flatten(grads);
    std::vector<double> x0 = flatten(inputs);

    Rng pick(derive_seed(seed, "pick"));
    auto st = oracle::grad_check(eval, x0, analytic, pick, 0, 1e-5);
    CHECK(st.checked == x0.size());
    CHECK(st.max_rel_err < tol);
}

}  // namespace

TEST_CASE("matmul matches the triple-loop oracle") {
    Rng rng(42);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tape tape;
    Var va = tape.leaf(a), vb = tape.leaf(b);
    Tensor got = tape.value_tensor(tape.matmul(va, vb));
    Tensor want = oracle::matmul_triple_loop(a, b);
    CHECK(max_abs_diff(got, want) <= 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape tape;
    Var a = tape.leaf(Tensor({3, 4}, 1.0));
    Var b = tape.leaf(Tensor({5, 2}, 1.0));
    try {
        tape.matmul(a, b);
        FAIL("expected an exception");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[3x4]") != std::string::npos);
        CHECK(msg.find("[5x2]") != std::string::npos);
    }
}

TEST_CASE("sigmoid(0) = 0.5 and softmax of uniform logits is uniform") {
    Tape tape;
    Var z = tape.leaf(Tensor({1, 3}, 0.0));
    CHECK(tape.val(tape.sigmoid(z))[0] == doctest::Approx(0.5).epsilon(1e-15));
    Var ones = tape.leaf(Tensor({1, 3}, 1.0));
    auto sm = tape.val(tape.softmax(ones, 1));
    for (double v : sm) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one and entries lie in (0,1)") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor logits = random_tensor({6, 9}, rng, -30.0, 30.0);
        Tape tape;
        auto sm = tape.value_tensor(tape.softmax(tape.leaf(logits), 1));
        for (std::int64_t i = 0; i < 6; ++i) {
            double s = 0.0;
            for (std::int64_t j = 0; j < 9; ++j) {
                double v = sm.at(i, j);
                CHECK(v > 0.0);
                CHECK(v < 1.0);
                s += v;
            }
            CHECK(std::fabs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("dropout contract") {
    Rng rng(11);
    Tensor x = random_tensor({4, 5}, rng);
    Tape tape;
    Var vx = tape.leaf(x, true);

    SUBCASE("rate outside [0,1) is rejected") {
        Rng r(0);
        CHECK_THROWS_AS(tape.dropout(vx, 1.0, true, r), std::invalid_argument);
        CHECK_THROWS_AS(tape.dropout(vx, -0.1, true, r), std::invalid_argument);
    }

    SUBCASE("evaluation mode is bit-identical to the input") {
        Rng r(0);
        Var out = tape.dropout(vx, 0.5, false, r);
        CHECK(out.id == vx.id);  // identity, not a copy
        CHECK(tape.value_tensor(out) == x);
    }

    SUBCASE("same seed gives the same mask, and kept values are scaled by 1/keep") {
        Rng r1(99), r2(99);
        Var o1 = tape.dropout(vx, 0.3, true, r1);
        Var o2 = tape.dropout(vx, 0.3, true, r2);
        CHECK(tape.value_tensor(o1) == tape.value_tensor(o2));
        auto v = tape.val(o1);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double in = x[i];
            const bool kept = v[i] != 0.0;
            if (kept) CHECK(v[i] == doctest::Approx(in / 0.7).epsilon(1e-15));
        }
    }
}

TEST_CASE("backward on a non-scalar loss is an error") {
    Tape tape;
    Var x = tape.leaf(Tensor({2, 2}, 1.0), true);
    Var y = tape.mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward twice without a fresh forward pass is an error") {
    Tape tape;
    Var x = tape.leaf(Tensor({2, 2}, 1.0), true);
    Var loss = tape.sum_all(x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::invalid_argument);
    tape.reset();
    Var x2 = tape.leaf(Tensor({2, 2}, 1.0), true);
    CHECK_NOTHROW(tape.backward(tape.sum_all(x2)));
}

TEST_CASE("gradient of sum(w) is all ones; gradient of sum(w*w)/2 is w") {
    Rng rng(5);
    Tensor w = random_tensor({3, 7}, rng);
    {
        Tape tape;
        Var vw = tape.leaf(w, true);
        tape.backward(tape.sum_all(vw));
        Tensor g = tape.grad_tensor(vw);
        for (std::int64_t i = 0; i < g.numel(); ++i)
            CHECK(g[static_cast<std::size_t>(i)] == doctest::Approx(1.0).epsilon(1e-15));
    }
    {
        Tape tape;
        Var vw = tape.leaf(w, true);
        Var loss = tape.scale(tape.sum_all(tape.mul(vw, vw)), 0.5);
        tape.backward(loss);
        CHECK(max_abs_diff(tape.grad_tensor(vw), w) <= 1e-15);
    }
}

TEST_CASE("finite differences validate every op") {
    Rng rng(2024);

    SUBCASE("matmul") {
        check_gradients({random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.matmul(v[0], v[1]); }, 1);
    }
    SUBCASE("transpose") {
        check_gradients({random_tensor({3, 5}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.transpose(v[0]); }, 2);
    }
    SUBCASE("add sub mul div") {
        std::vector<Tensor> in = {random_tensor({4, 3}, rng), random_tensor({4, 3}, rng, 0.5, 2.0)};
        check_gradients(in, [](Tape& t, std::vector<Var>& v) { return t.add(v[0], v[1]); }, 3);
        check_gradients(in, [](Tape& t, std::vector<Var>& v) { return t.sub(v[0], v[1]); }, 4);
        check_gradients(in, [](Tape& t, std::vector<Var>& v) { return t.mul(v[0], v[1]); }, 5);
        check_gradients(in, [](Tape& t, std::vector<Var>& v) { return t.div(v[0], v[1]); }, 6);
    }
    SUBCASE("broadcast add_row sub_col mul_col") {
        check_gradients({random_tensor({4, 3}, rng), random_tensor({1, 3}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.add_row(v[0], v[1]); }, 7);
        check_gradients({random_tensor({4, 3}, rng), random_tensor({4, 1}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.sub_col(v[0], v[1]); }, 8);
        check_gradients({random_tensor({4, 3}, rng), random_tensor({4, 1}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.mul_col(v[0], v[1]); }, 9);
    }
    SUBCASE("scale concat") {
        check_gradients({random_tensor({2, 3}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.scale(v[0], -2.5); }, 10);
        check_gradients({random_tensor({2, 3}, rng), random_tensor({2, 4}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.concat({v[0], v[1]}, 1); }, 11);
        check_gradients({random_tensor({2, 3}, rng), random_tensor({4, 3}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.concat({v[0], v[1]}, 0); }, 12);
    }
    SUBCASE("activations") {
        check_gradients({random_tensor({3, 4}, rng, -2.0, 2.0)},
                        [](Tape& t, std::vector<Var>& v) { return t.sigmoid(v[0]); }, 13);
        check_gradients({random_tensor({3, 4}, rng, -2.0, 2.0)},
                        [](Tape& t, std::vector<Var>& v) { return t.tanh_(v[0]); }, 14);
        // keep inputs away from the kink so central differences are valid
        Tensor xr = random_tensor({3, 4}, rng, 0.05, 2.0);
        for (std::size_t i = 0; i < xr.vec().size(); i += 2) xr[i] = -xr[i];
        check_gradients({xr}, [](Tape& t, std::vector<Var>& v) { return t.relu(v[0]); }, 15);
        check_gradients({random_tensor({3, 4}, rng, -1.0, 1.0)},
                        [](Tape& t, std::vector<Var>& v) { return t.exp_(v[0]); }, 16);
        check_gradients({random_tensor({3, 4}, rng, 0.5, 3.0)},
                        [](Tape& t, std::vector<Var>& v) { return t.log_(v[0]); }, 17);
    }
    SUBCASE("reductions") {
        check_gradients({random_tensor({3, 4}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.sum_all(v[0]); }, 18);
        check_gradients({random_tensor({3, 4}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.mean_all(v[0]); }, 19);
        check_gradients({random_tensor({3, 4}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.sum_axis(v[0], 0); }, 20);
        check_gradients({random_tensor({3, 4}, rng)},
                        [](Tape& t, std::vector<Var>& v) { return t.sum_axis(v[0], 1); }, 21);
    }
    SUBCASE("softmax both axes") {
        check_gradients({random_tensor({3, 5}, rng, -3.0, 3.0)},
                        [](Tape& t, std::vector<Var>& v) { return t.softmax(v[0], 1); }, 22);
        check_gradients({random_tensor({3, 5}, rng, -3.0, 3.0)},
                        [](Tape& t, std::vector<Var>& v) { return t.softmax(v[0], 0); }, 23);
    }
    SUBCASE("dropout with a fixed mask") {
        check_gradients({random_tensor({4, 6}, rng)},
                        [](Tape& t, std::vector<Var>& v) {
                            Rng mask_rng(123);  // same mask on every evaluation
                            return t.dropout(v[0], 0.4, true, mask_rng);
                        },
                        24);
    }
    SUBCASE("gather segment take") {
        auto idx = std::make_shared<IndexVec>(IndexVec{2, 0, 1, 2, 2});
        check_gradients({random_tensor({3, 4}, rng)},
                        [idx](Tape& t, std::vector<Var>& v) { return t.gather_rows(v[0], idx); },
                        25);
        auto seg = std::make_shared<IndexVec>(IndexVec{0, 1, 1, 2, 0});
        check_gradients({random_tensor({5, 3}, rng)},
                        [seg](Tape& t, std::vector<Var>& v) { return t.segment_sum(v[0], seg, 3); },
                        26);
        auto cols = std::make_shared<IndexVec>(IndexVec{1, 3, 0});
        check_gradients({random_tensor({3, 4}, rng)},
                        [cols](Tape& t, std::vector<Var>& v) { return t.take_per_row(v[0], cols); },
                        27);
    }
    SUBCASE("block matrix mixing") {
        Rng mg(55);
        auto m = std::make_shared<Tensor>(random_tensor({3, 3}, mg));
        check_gradients({random_tensor({6, 4}, rng)},
                        [m](Tape& t, std::vector<Var>& v) { return t.block_mat_const(v[0], m); },
                        28);
    }
    SUBCASE("stable softmax composed from segment primitives") {
        // exp / segment-sum / div chain used by the attention layer
        auto seg = std::make_shared<IndexVec>(IndexVec{0, 0, 1, 1, 1, 2});
        check_gradients({random_tensor({6, 1}, rng, -3.0, 3.0)},
                        [seg](Tape& t, std::vector<Var>& v) {
                            Var m = t.segment_max_detached(v[0], seg, 3);
                            Var shifted = t.sub(v[0], t.gather_rows(m, seg));
                            Var e = t.exp_(shifted);
                            Var den = t.segment_sum(e, seg, 3);
                            return t.div(e, t.gather_rows(den, seg));
                        },
                        29);
    }
}

TEST_CASE("replaying a seeded forward+backward twice is bit-identical") {
    auto run = [](std::vector<double>& grads_out) {
        Rng rng(777);
        Tensor a = random_tensor({8, 6}, rng);
        Tensor b = random_tensor({6, 4}, rng);
        Tape tape;
        Var va = tape.leaf(a, true), vb = tape.leaf(b, true);
        Var h = tape.tanh_(tape.matmul(va, vb));
        Rng drop(31);
        h = tape.dropout(h, 0.2, true, drop);
        Var loss = tape.mean_all(tape.mul(h, h));
        tape.backward(loss);
        grads_out = tape.grad_tensor(va).vec();
        auto gb = tape.grad_tensor(vb).vec();
        grads_out.insert(grads_out.end(), gb.begin(), gb.end());
        return tape.val(loss)[0];
    };
    std::vector<double> g1, g2;
    double l1 = run(g1), l2 = run(g2);
    CHECK(l1 == l2);
    CHECK(g1 == g2);
}

TEST_CASE("forward ops keep finite inputs finite") {
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = random_tensor({5, 5}, rng, -50.0, 50.0);
        Tape tape;
        Var v = tape.leaf(a, true);
        Var out = tape.softmax(tape.tanh_(tape.matmul(v, tape.transpose(v))), 1);
        CHECK(tape.value_tensor(out).all_finite());
    }
}

TEST_CASE("tape reuse after reset keeps results identical") {
    Rng rng(1);
    Tensor a = random_tensor({4, 4}, rng);
    Tape tape;
    std::vector<double> first;
    for (int pass = 0; pass < 3; ++pass) {
        tape.reset();
        Var v = tape.leaf(a, true);
        Var loss = tape.sum_all(tape.sigmoid(tape.matmul(v, v)));
        tape.backward(loss);
        auto g = tape.grad_tensor(v).vec();
        if (pass == 0)
            first = g;
        else
            CHECK(first == g);
    }
}
