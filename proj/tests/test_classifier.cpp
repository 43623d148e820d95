#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "invreg/classifier.hpp"
#include "invreg/training.hpp"

using namespace invreg;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

double row0(const Tensor& t) { return t.at(0); }

Architecture small_arch() {
  Architecture a;
  a.height = 8;
  a.width = 8;
  a.conv_widths = {3};
  a.dense_widths = {6};
  a.classes = 3;
  return a;
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("invreg_test_" + name); }

}  // namespace

TEST_CASE("zero final layer gives the bias vector for any input") {
  Classifier m = Classifier::create(small_arch(), 4);
  auto& ps = m.parameters();
  auto w = ps[ps.size() - 2].mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  auto b = ps.back().mutable_values();
  b[0] = 0.25, b[1] = -1.5, b[2] = 3.0;
  Rng rng(1);
  for (int i = 0; i < 3; ++i) {
    const Tensor logits = m.logits(random_tensor({2, 8, 8, 1}, rng));
    for (std::size_t r = 0; r < 2; ++r) {
      CHECK(logits.at(r * 3 + 0) == 0.25);
      CHECK(logits.at(r * 3 + 1) == -1.5);
      CHECK(logits.at(r * 3 + 2) == 3.0);
    }
  }
}

TEST_CASE("same seed gives bitwise identical parameters and logits") {
  const Classifier a = Classifier::create(small_arch(), 17);
  const Classifier b = Classifier::create(small_arch(), 17);
  const Classifier c = Classifier::create(small_arch(), 18);
  Rng rng(2);
  const Tensor x = random_tensor({4, 8, 8, 1}, rng);
  const Tensor la = a.logits(x), lb = b.logits(x), lc = c.logits(x);
  CHECK(std::equal(la.values().begin(), la.values().end(), lb.values().begin()));
  CHECK_FALSE(std::equal(la.values().begin(), la.values().end(), lc.values().begin()));
}

TEST_CASE("logits reject mismatched inputs") {
  const Classifier m = Classifier::create(small_arch(), 1);
  CHECK_THROWS_AS(m.logits(Tensor::zeros({1, 9, 8, 1})), ShapeError);
  Architecture bad = small_arch();
  bad.classes = 1;
  CHECK_THROWS_AS(Classifier::create(bad, 0), std::invalid_argument);
}

TEST_CASE("cross entropy examples") {
  Tape tape(Tape::Mode::Inference);
  const Tensor uniform = Tensor::zeros({1, 10});
  const std::vector<int> y0{3};
  CHECK(row0(cross_entropy(tape, uniform, one_hot(y0, 10))) == doctest::Approx(2.302585).epsilon(1e-7));

  const Tensor margin({1, 3}, {60.0, 0.0, 0.0});
  const std::vector<int> y1{0};
  CHECK(row0(cross_entropy(tape, margin, one_hot(y1, 3))) < 1e-20);

  const Tensor l({1, 3}, {1.0, 2.0, 3.0});
  const std::vector<int> y2{2};
  CHECK(row0(cross_entropy(tape, l, one_hot(y2, 3))) == doctest::Approx(0.40760596444438013).epsilon(1e-12));
}

TEST_CASE("KL divergence examples and properties") {
  Tape tape(Tape::Mode::Inference);
  const Tensor a({1, 2}, {0.0, 0.0});
  const Tensor b({1, 2}, {0.0, std::log(3.0)});
  CHECK(row0(kl_div(tape, a, b)) == doctest::Approx(0.14384103622589042).epsilon(1e-12));
  CHECK(row0(kl_div(tape, b, b)) == 0.0);
  const Tensor shifted({1, 2}, {5.0, 5.0 + std::log(3.0)});
  CHECK(std::abs(row0(kl_div(tape, shifted, b))) < 1e-15);

  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const Tensor p = random_tensor({1, 4}, rng, -3, 3), q = random_tensor({1, 4}, rng, -3, 3);
    CHECK(row0(kl_div(tape, p, q)) >= 0.0);
    CHECK(row0(kl_div(tape, p, p)) == 0.0);
  }
}

TEST_CASE("cross entropy minus label entropy equals KL for soft labels") {
  Tape tape(Tape::Mode::Inference);
  Rng rng(4);
  for (int i = 0; i < 30; ++i) {
    const Tensor a = random_tensor({1, 4}, rng, -2, 2);
    std::vector<double> y(4);
    double s = 0.0;
    for (auto& v : y) s += (v = rng.uniform(0.05, 1.0));
    double h = 0.0;
    for (auto& v : y) {
      v /= s;
      h -= v * std::log(v);
    }
    // D_KL(y || softmax(a)) computed independently.
    const Tensor lsm = ad::log_softmax(tape, a);
    double kl = 0.0;
    for (std::size_t c = 0; c < 4; ++c) kl += y[c] * (std::log(y[c]) - lsm.at(c));
    const double ce = row0(cross_entropy(tape, a, Tensor({1, 4}, y)));
    CHECK(std::abs(ce - h - kl) < 1e-9);
  }
}

TEST_CASE("squared logit distance examples and semimetric axioms") {
  Tape tape(Tape::Mode::Inference);
  CHECK(row0(l2_logit_dist(tape, Tensor({1, 2}, {1.0, 0.0}), Tensor({1, 2}, {0.0, 1.0}))) == 2.0);
  CHECK(row0(l2_logit_dist(tape, Tensor({1, 1}, {3.0}), Tensor({1, 1}, {-1.0}))) == 16.0);
  Rng rng(5);
  for (int i = 0; i < 30; ++i) {
    const Tensor a = random_tensor({1, 3}, rng, -2, 2), b = random_tensor({1, 3}, rng, -2, 2);
    const double ab = row0(l2_logit_dist(tape, a, b)), ba = row0(l2_logit_dist(tape, b, a));
    CHECK(ab == ba);
    CHECK(ab > 0.0);
    CHECK(row0(l2_logit_dist(tape, a, a)) == 0.0);
  }
}

TEST_CASE("loss gradients with respect to logits match central differences") {
  Rng rng(6);
  const Tensor other = random_tensor({3, 4}, rng, -2, 2);
  const Tensor x = random_tensor({3, 4}, rng, -2, 2);
  const std::vector<int> labels{0, 3, 1};
  const Tensor y = one_hot(labels, 4);
  auto ce = finite_difference_check([&](Tape& t, const Tensor& v) { return cross_entropy(t, v, y); }, x, 1e-5);
  auto kla = finite_difference_check([&](Tape& t, const Tensor& v) { return kl_div(t, v, other); }, x, 1e-5);
  auto klb = finite_difference_check([&](Tape& t, const Tensor& v) { return kl_div(t, other, v); }, x, 1e-5);
  auto l2 = finite_difference_check([&](Tape& t, const Tensor& v) { return l2_logit_dist(t, v, other); }, x, 1e-5);
  CHECK(ce.max_relative_error < 1e-6);
  CHECK(kla.max_relative_error < 1e-6);
  CHECK(klb.max_relative_error < 1e-6);
  CHECK(l2.max_relative_error < 1e-6);
}

TEST_CASE("argmax ties go to the lowest index") {
  const std::vector<double> a{0.1, 0.9, 0.3};
  CHECK(argmax(a) == 1);
  const std::vector<double> b{2.0, 2.0, 2.0};
  CHECK(argmax(b) == 0);
  CHECK(predict(Tensor({2, 3}, {0.1, 0.9, 0.3, 1.0, 1.0, 0.0})) == std::vector<int>{1, 0});
}

TEST_CASE("a linear model fitted on four points predicts their labels") {
  Architecture arch;
  arch.height = 2;
  arch.width = 2;
  arch.conv_widths = {};
  arch.dense_widths = {};
  arch.classes = 4;
  Classifier m = Classifier::create(arch, 3);
  std::vector<double> pix(16, 0.0);
  for (int i = 0; i < 4; ++i) pix[i * 4 + i] = 1.0;
  const Tensor x({4, 2, 2, 1}, pix);
  const std::vector<int> labels{2, 0, 3, 1};
  const Tensor y = one_hot(labels, 4);
  std::vector<std::vector<double>> vel;
  for (int step = 0; step < 300; ++step) {
    Tape tape;
    m.zero_grad();
    tape.backward(cross_entropy(tape, m.logits(tape, x), y));
    sgd_step(m.parameters(), vel, m.parameter_names(), 0.5, 0.9, 0.0, static_cast<std::size_t>(step));
  }
  CHECK(predict(m.logits(x)) == labels);
}

TEST_CASE("checkpoint round trip is bitwise after storage rounding") {
  Classifier m = Classifier::create(small_arch(), 9);
  m.set_normalization({{0.3}, {0.2}});
  const fs::path path = temp_file("roundtrip.ckpt");
  save_checkpoint(m, path);
  const Classifier loaded = load_checkpoint(path, small_arch());
  m.round_to_storage_precision();
  Rng rng(7);
  const Tensor x = random_tensor({3, 8, 8, 1}, rng);
  const Tensor a = m.logits(x), b = loaded.logits(x);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  CHECK(loaded.normalization().mean == m.normalization().mean);
  fs::remove(path);
}

TEST_CASE("checkpoint errors") {
  const Classifier m = Classifier::create(small_arch(), 9);
  const fs::path path = temp_file("errors.ckpt");
  save_checkpoint(m, path);
  const auto full = fs::file_size(path);

  Architecture other = small_arch();
  other.classes = 5;
  try {
    load_checkpoint(path, other);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("class") != std::string::npos);
  }

  fs::resize_file(path, full - 7);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOPE and some bytes";
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  fs::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}
