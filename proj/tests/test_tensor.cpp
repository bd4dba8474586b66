#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "director/optim.hpp"
#include "director/rng.hpp"
#include "director/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace director;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, bool requires_grad = true,
                     double scl = 1.0) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> vals(static_cast<size_t>(n));
  for (double& v : vals) v = rng.gaussian() * scl;
  return Tensor(std::move(shape), std::move(vals), requires_grad);
}

}  // namespace

TEST_CASE("construction validates shape") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({0}, {}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2, -1}, {}), std::invalid_argument);
  Tensor t({2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.at(1, 0) == 3.0);
}

TEST_CASE("softmax fixed points") {
  Tensor x({2}, {0.0, 0.0});
  Tensor y = softmax(x);
  CHECK(y.at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.at(1) == doctest::Approx(0.5).epsilon(1e-12));

  // softmax([ln 1, ln 3]) = [0.25, 0.75]
  Tensor z = softmax(Tensor({2}, {std::log(1.0), std::log(3.0)}));
  CHECK(z.at(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(z.at(1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows normalize on random input") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, false, 3.0);
    Tensor y = softmax(x);
    for (int64_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (int64_t c = 0; c < 7; ++c) {
        const double p = y.at(r, c);
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        total += p;
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("sigmoid identity point and saturation") {
  Tensor y = sigmoid(Tensor({1}, {0.0}));
  CHECK(y.item() == doctest::Approx(0.5).epsilon(1e-15));
  // sign-split formulation stays finite far out in both tails
  Tensor t = sigmoid(Tensor({2}, {-1000.0, 1000.0}));
  CHECK(t.at(0) >= 0.0);
  CHECK(t.at(1) == doctest::Approx(1.0));
}

TEST_CASE("matmul identity and shape report") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor y = matmul(a, eye);
  for (int64_t i = 0; i < 4; ++i) CHECK(y.at(i) == a.at(i));

  try {
    matmul(Tensor({2, 3}, std::vector<double>(6, 0.0)),
           Tensor({4, 2}, std::vector<double>(8, 0.0)));
    FAIL("expected shape mismatch");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2 x 3]") != std::string::npos);
    CHECK(msg.find("[4 x 2]") != std::string::npos);
  }
}

TEST_CASE("backward seeds loss grad with one and fills reachable grads") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tape tape;
  Tensor loss = sum(x);
  tape.backward(loss);
  CHECK(loss.grad()[0] == 1.0);
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("sigmoid gradient at zero is a quarter") {
  Tensor w = Tensor::scalar(0.0, true);
  Tape tape;
  Tensor loss = sigmoid(w);
  tape.backward(loss);
  CHECK(w.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar loss and double invocation") {
  Tensor x({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  Tensor loss = sum(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
}

TEST_CASE("gradients accumulate across multiple uses of one tensor") {
  Tensor x({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor y = add(x, x);
  tape.backward(sum(y));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("tensor from an expired tape is rejected as op input") {
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor mid;
  {
    Tape tape;
    mid = scale(x, 2.0);
    tape.backward(sum(mid));
  }
  Tape tape2;
  CHECK_THROWS_AS(scale(mid, 1.0), std::logic_error);
}

TEST_CASE("linearity of backward") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({3, 2}, rng);
    const double a = rng.gaussian(), b = rng.gaussian();

    auto grads_of = [&x](const std::function<Tensor()>& f) {
      Tape tape;
      Tensor loss = f();
      tape.backward(loss);
      std::vector<double> g(x.grad().begin(), x.grad().end());
      x.zero_grad();
      return g;
    };

    auto f = [&x] { return sum(mul(x, x)); };
    auto g = [&x] { return mean(sigmoid(x)); };
    auto combo = [&] { return add(scale(f(), a), scale(g(), b)); };

    auto gf = grads_of(f);
    auto gg = grads_of(g);
    auto gc = grads_of(combo);
    for (size_t i = 0; i < gc.size(); ++i) {
      CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("determinism: identical seed and op sequence give identical bits") {
  auto run = [] {
    Rng rng(1234);
    Tensor x = random_tensor({4, 4}, rng);
    Tensor w = random_tensor({4, 4}, rng);
    Tape tape;
    Tensor loss = mean(sigmoid(matmul(x, w)));
    tape.backward(loss);
    std::vector<double> out(loss.values().begin(), loss.values().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

// ---- finite-difference checks, one per primitive ----------------------------

TEST_CASE("finite differences: elementwise and reduction primitives") {
  Rng rng(42);
  const double tol = 1e-4;
  for (int trial = 0; trial < 25; ++trial) {
    Tensor x = random_tensor({2, 4}, rng);
    Tensor y = random_tensor({2, 4}, rng);

    auto check = [&](const char* name, const std::function<Tensor()>& f) {
      auto rep = gradcheck::finite_diff({x, y}, f);
      INFO(name, ": ", rep.worst);
      CHECK(rep.max_rel_err < tol);
    };

    check("add", [&] { return mean(add(x, y)); });
    check("sub", [&] { return mean(sub(x, y)); });
    check("mul", [&] { return mean(mul(x, y)); });
    check("scale+add_scalar", [&] { return sum(add_scalar(scale(x, 1.7), 0.3)); });
    check("sigmoid", [&] { return mean(sigmoid(x)); });
    check("exp", [&] { return mean(director::exp(scale(x, 0.3))); });
    check("gelu", [&] { return mean(gelu(x)); });
    check("softmax", [&] { return mean(mul(softmax(x), y)); });
    check("log_softmax", [&] { return mean(mul(log_softmax(x), y)); });
  }
}

TEST_CASE("finite differences: log and clamp away from kinks") {
  Rng rng(43);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> vals(6);
    for (double& v : vals) v = 0.5 + rng.uniform() * 2.0;  // keep log well-defined
    Tensor x({2, 3}, vals, true);
    auto rep = gradcheck::finite_diff({x}, [&] { return mean(director::log(x)); });
    CHECK(rep.max_rel_err < 1e-4);
    // clamp window chosen so no element sits near a boundary
    auto rep2 = gradcheck::finite_diff({x}, [&] { return mean(clamp(x, 0.1, 10.0)); });
    CHECK(rep2.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: matmul, transpose, bias") {
  Rng rng(44);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({3, 2}, rng);
    Tensor bias = random_tensor({2}, rng);
    auto rep = gradcheck::finite_diff({a, b, bias}, [&] {
      return mean(add_bias(matmul(a, transpose(transpose(b))), bias));
    });
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: layer_norm") {
  Rng rng(45);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor x = random_tensor({2, 4}, rng);
    Tensor g = random_tensor({4}, rng);
    Tensor b = random_tensor({4}, rng);
    auto rep = gradcheck::finite_diff({x, g, b}, [&] {
      return mean(layer_norm(x, g, b));
    });
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: gather, slice, concat, masked_fill") {
  Rng rng(46);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor table = random_tensor({5, 3}, rng);
    std::vector<int> ids = {4, 0, 2, 0};
    auto rep = gradcheck::finite_diff({table}, [&] {
      return mean(gather_rows(table, ids));
    });
    CHECK(rep.max_rel_err < 1e-4);

    Tensor x = random_tensor({3, 4}, rng);
    std::vector<int64_t> rr = {0, 2, 1};
    std::vector<int64_t> cc = {3, 0, 1};
    auto rep2 = gradcheck::finite_diff({x}, [&] {
      return sum(gather_entries(x, rr, cc));
    });
    CHECK(rep2.max_rel_err < 1e-4);

    auto rep3 = gradcheck::finite_diff({x}, [&] {
      return mean(slice(x, 1, 1, 3));
    });
    CHECK(rep3.max_rel_err < 1e-4);

    Tensor y = random_tensor({3, 2}, rng);
    auto rep4 = gradcheck::finite_diff({x, y}, [&] {
      std::vector<Tensor> parts = {slice(x, 1, 0, 2), y};
      return mean(concat(parts, 1));
    });
    CHECK(rep4.max_rel_err < 1e-4);

    std::vector<uint8_t> mask = {1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0};
    auto rep5 = gradcheck::finite_diff({x}, [&] {
      return mean(mul(masked_fill(x, mask, -10.0), x));
    });
    CHECK(rep5.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: composite two-layer network") {
  Rng rng(47);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({2, 4}, rng, false);
    Tensor w1 = random_tensor({4, 4}, rng, true, 0.5);
    Tensor b1 = random_tensor({4}, rng, true, 0.1);
    Tensor w2 = random_tensor({4, 2}, rng, true, 0.5);
    Tensor b2 = random_tensor({2}, rng, true, 0.1);
    Tensor g = Tensor::full({4}, 1.0, true);
    Tensor b = Tensor::zeros({4}, true);
    auto rep = gradcheck::finite_diff({w1, b1, w2, b2, g, b}, [&] {
      Tensor h = gelu(add_bias(matmul(x, w1), b1));
      Tensor h2 = layer_norm(h, g, b);
      Tensor out = log_softmax(add_bias(matmul(h2, w2), b2));
      return neg(mean(out));
    });
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

// ---- optimizer ---------------------------------------------------------------

TEST_CASE("sgd applies lr times grad and zeroes grads") {
  Tensor w = Tensor::scalar(1.0, true);
  {
    Tape tape;
    Tensor loss = scale(w, 2.0);  // d/dw = 2
    tape.backward(loss);
  }
  Optimizer opt({w}, {.kind = OptimKind::sgd, .learning_rate = 0.1});
  opt.step();
  CHECK(w.item() == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(opt.step_count() == 1);
  for (double g : w.grad()) CHECK(g == 0.0);
}

TEST_CASE("zero gradient leaves parameters unchanged") {
  for (OptimKind kind : {OptimKind::sgd, OptimKind::adam, OptimKind::adamax}) {
    Tensor w({3}, {1.0, -2.0, 3.0}, true);
    w.ensure_grad();
    Optimizer opt({w}, {.kind = kind, .learning_rate = 0.5});
    opt.step();
    CHECK(w.at(0) == 1.0);
    CHECK(w.at(1) == -2.0);
    CHECK(w.at(2) == 3.0);
  }
}

TEST_CASE("adaptive optimizers approach lr-sized steps under constant gradient") {
  for (OptimKind kind : {OptimKind::adam, OptimKind::adamax}) {
    Tensor w = Tensor::scalar(0.0, true);
    const double lr = 0.01;
    Optimizer opt({w}, {.kind = kind, .learning_rate = lr});
    double prev = w.item();
    double step_size = 0.0;
    for (int i = 0; i < 200; ++i) {
      w.ensure_grad();
      w.grad_mut()[0] = 3.0;  // constant gradient
      opt.step();
      step_size = prev - w.item();
      prev = w.item();
    }
    CHECK(step_size == doctest::Approx(lr).epsilon(1e-3));
  }
}

TEST_CASE("optimizer rejects missing gradients") {
  Tensor w = Tensor::scalar(1.0, true);  // never used in a graph
  Optimizer opt({w}, {.kind = OptimKind::sgd, .learning_rate = 0.1});
  CHECK_THROWS_AS(opt.step(), std::invalid_argument);
}

TEST_CASE("rng substreams are stable and distinct") {
  const uint64_t a = substream_seed(7, "data");
  CHECK(a == substream_seed(7, "data"));
  CHECK(a != substream_seed(7, "init"));
  CHECK(a != substream_seed(8, "data"));
}
