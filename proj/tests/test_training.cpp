#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "invreg/training.hpp"

using namespace invreg;

namespace {

Architecture linear_arch(std::size_t size, std::size_t classes) {
  Architecture a;
  a.height = a.width = size;
  a.conv_widths = {};
  a.dense_widths = {};
  a.classes = classes;
  return a;
}

// Bright top half (class 0) or bright bottom half (class 1), lightly jittered.
Dataset halves(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.height = d.width = 8;
  d.classes = 2;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) {
        const bool top = y < 4;
        const double base = (top == (label == 0)) ? 0.9 : 0.1;
        d.pixels.push_back(std::round(255 * std::clamp(base + rng.uniform(-0.05, 0.05), 0.0, 1.0)) / 255);
      }
    }
    d.labels.push_back(label);
  }
  return d;
}

Dataset noise_data(std::size_t n, std::size_t size, std::size_t classes, std::uint64_t seed) {
  Dataset d;
  d.height = d.width = size;
  d.classes = classes;
  Rng rng(seed);
  d.pixels.resize(n * size * size);
  for (auto& v : d.pixels) v = rng.uniform();
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % classes));
  return d;
}

Architecture small_conv() {
  Architecture a;
  a.height = a.width = 8;
  a.conv_widths = {2};
  a.dense_widths = {4};
  a.classes = 3;
  return a;
}

}  // namespace

TEST_CASE("learning rate drops at the half and three-quarter steps") {
  TrainConfig c;
  c.lr0 = 0.1;
  c.iterations = 3000;
  CHECK(learning_rate(c, 0) == 0.1);
  CHECK(learning_rate(c, 1499) == 0.1);
  CHECK(learning_rate(c, 1500) == 0.1 / 10);
  CHECK(learning_rate(c, 2249) == 0.1 / 10);
  CHECK(learning_rate(c, 2250) == 0.1 / 100);
  c.iterations = 7;
  CHECK(learning_rate(c, 2) == 0.1);
  CHECK(learning_rate(c, 3) == 0.1 / 10);
  CHECK(learning_rate(c, 4) == 0.1 / 10);
  CHECK(learning_rate(c, 5) == 0.1 / 100);
  CHECK(TrainConfig::full_scale().iterations == 80000);
  CHECK(TrainConfig::full_scale().momentum == 0.9);
}

TEST_CASE("sgd step rules") {
  std::vector<Tensor> params{Tensor({3}, {1.0, -2.0, 0.5}, true)};
  const std::vector<std::string> names{"w"};
  std::vector<std::vector<double>> vel;

  auto g = params[0].grad_buffer();
  g[0] = 0.5, g[1] = -1.0, g[2] = 0.0;
  sgd_step(params, vel, names, 0.1, 0.0, 0.0);
  CHECK(params[0].at(0) == 1.0 - 0.1 * 0.5);
  CHECK(params[0].at(1) == -2.0 + 0.1 * 1.0);
  CHECK(params[0].at(2) == 0.5);

  params[0].zero_grad();
  std::vector<std::vector<double>> fresh;
  const std::vector<double> before{params[0].values().begin(), params[0].values().end()};
  sgd_step(params, fresh, names, 0.1, 0.9, 0.0);
  CHECK(std::equal(before.begin(), before.end(), params[0].values().begin()));

  // Coupled weight decay with momentum, two steps by hand.
  std::vector<Tensor> p{Tensor({1}, {2.0}, true)};
  std::vector<std::vector<double>> v;
  p[0].grad_buffer()[0] = 1.0;
  sgd_step(p, v, names, 0.1, 0.9, 0.01);
  const double v1 = 1.0 + 0.01 * 2.0;
  const double t1 = 2.0 - 0.1 * v1;
  CHECK(p[0].at(0) == t1);
  sgd_step(p, v, names, 0.1, 0.9, 0.01);
  const double v2 = 0.9 * v1 + 1.0 + 0.01 * t1;
  CHECK(p[0].at(0) == t1 - 0.1 * v2);
}

TEST_CASE("non-finite gradients abort before any update") {
  std::vector<Tensor> params{Tensor({2}, {1.0, 2.0}, true), Tensor({1}, {3.0}, true)};
  const std::vector<std::string> names{"dense1.weight", "dense1.bias"};
  params[0].grad_buffer()[0] = 1.0;
  params[1].grad_buffer()[0] = std::nan("");
  std::vector<std::vector<double>> vel;
  try {
    sgd_step(params, vel, names, 0.1, 0.9, 0.0, 17);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.step() == 17);
    CHECK(e.name() == "dense1.bias");
  }
  CHECK(params[0].at(0) == 1.0);
}

TEST_CASE("augmentation modes") {
  const Dataset d = noise_data(6, 8, 2, 1);
  const Tensor imgs = d.all_images();
  const SearchSet set = build_search_set(30, 3, 8, 8);
  const SeedStream s(5);
  const Tensor none = standard_augment(imgs, Augmentation::None, set, s);
  CHECK(std::equal(none.values().begin(), none.values().end(), imgs.values().begin()));

  const Tensor flip = standard_augment(imgs, Augmentation::FlipOnly, set, s);
  const Tensor flipped_all = flip_horizontal(imgs);
  std::size_t flips = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto a = flip.values().subspan(i * 64, 64);
    const bool same = std::equal(a.begin(), a.end(), imgs.values().begin() + i * 64);
    const bool mirrored = std::equal(a.begin(), a.end(), flipped_all.values().begin() + i * 64);
    CHECK((same || mirrored));
    flips += mirrored;
  }
  CHECK(flips > 0);
  CHECK(flips < 6);

  // Std uses whole-pixel shifts only: every output pixel is an input pixel or padding.
  const Tensor std_aug = standard_augment(imgs, Augmentation::Std, set, s, 2);
  for (std::size_t i = 0; i < 6; ++i) {
    std::vector<double> src(imgs.values().begin() + i * 64, imgs.values().begin() + (i + 1) * 64);
    std::sort(src.begin(), src.end());
    for (double v : std_aug.values().subspan(i * 64, 64)) {
      CHECK((v == 0.0 || std::binary_search(src.begin(), src.end(), v)));
    }
  }
  const Tensor again = standard_augment(imgs, Augmentation::StdStar, set, s);
  const Tensor star = standard_augment(imgs, Augmentation::StdStar, set, s);
  CHECK(std::equal(star.values().begin(), star.values().end(), again.values().begin()));
  CHECK(parse_augmentation("std*") == Augmentation::StdStar);
  CHECK(to_string(Augmentation::FlipOnly) == "flip-only");
  CHECK_THROWS_AS(parse_augmentation("rotate"), std::invalid_argument);
}

TEST_CASE("defended objectives only flip") {
  TrainConfig c;
  c.augmentation = Augmentation::StdStar;
  c.objective = parse_objective("AT(nat,wo10)", 0.0);
  CHECK(c.effective_augmentation() == Augmentation::StdStar);
  c.objective = parse_objective("AT(rob,wo10)", 0.0);
  CHECK(c.effective_augmentation() == Augmentation::FlipOnly);
  c.objective = parse_objective("KL(nat,wo10)", 0.5);
  CHECK(c.effective_augmentation() == Augmentation::FlipOnly);
  c.augmentation = Augmentation::None;
  CHECK(c.effective_augmentation() == Augmentation::None);
}

TEST_CASE("adversarial training on a separable toy set drives the loss to zero") {
  const Dataset d = halves(20, 2);
  TrainConfig c;
  c.objective = parse_objective("AT(rob,wo1)", 0.0);
  c.iterations = 400;
  c.batch_size = 20;
  c.lr0 = 0.1;
  c.max_trans_px = 1.0;
  const TrainResult r = train(c, d, Classifier::create(linear_arch(8, 2), 1));
  double tail = 0.0;
  for (std::size_t i = 390; i < 400; ++i) tail += r.log[i].total_loss / 10;
  CHECK(tail < 0.05);
  CHECK(r.log.front().total_loss > 10 * tail);
}

TEST_CASE("regularizer stays zero when every input looks the same") {
  Dataset d = noise_data(12, 8, 3, 3);
  std::fill(d.pixels.begin(), d.pixels.end(), 0.0);
  TrainConfig c;
  c.objective = parse_objective("KL(rob,wo10)", 1.0);
  c.iterations = 20;
  c.batch_size = 6;
  const TrainResult r = train(c, d, Classifier::create(small_conv(), 2));
  for (const auto& row : r.log) CHECK(row.reg_term == 0.0);
}

TEST_CASE("training is bitwise reproducible across runs and thread counts") {
  const Dataset d = noise_data(30, 8, 3, 4);
  TrainConfig c;
  c.objective = parse_objective("KL(mix,wo3)", 0.5);
  c.iterations = 8;
  c.batch_size = 10;
  c.lr0 = 0.05;
  c.seed = 9;
  const TrainResult a = train(c, d, Classifier::create(small_conv(), 3));
  const TrainResult b = train(c, d, Classifier::create(small_conv(), 3));
  c.threads = 3;
  const TrainResult t = train(c, d, Classifier::create(small_conv(), 3));
  REQUIRE(a.log.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a.log[i].total_loss == b.log[i].total_loss);
    CHECK(a.log[i].total_loss == t.log[i].total_loss);
    CHECK(a.log[i].reg_term == t.log[i].reg_term);
  }
  for (std::size_t p = 0; p < a.model.parameters().size(); ++p) {
    const auto x = a.model.parameters()[p].values(), y = t.model.parameters()[p].values();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }
}

TEST_CASE("small steps on a frozen batch decrease a linear model's loss") {
  const Dataset d = noise_data(16, 4, 3, 6);
  Classifier m = Classifier::create(linear_arch(4, 3), 4);
  const Tensor x = d.all_images();
  const Tensor y = one_hot(d.labels, 3);
  std::vector<std::vector<double>> vel;
  double prev = INFINITY;
  for (std::size_t step = 0; step < 30; ++step) {
    Tape tape;
    m.zero_grad();
    const Tensor loss = cross_entropy(tape, m.logits(tape, x), y);
    CHECK(loss.item() < prev);
    prev = loss.item();
    tape.backward(loss);
    sgd_step(m.parameters(), vel, m.parameter_names(), 1e-3, 0.9, 0.0, step);
  }
}

TEST_CASE("divergence keeps the last good parameters") {
  const Dataset d = noise_data(10, 8, 3, 7);
  TrainConfig c;
  c.objective = parse_objective("AT(nat,wo1)", 0.0);
  c.iterations = 50;
  c.batch_size = 5;
  c.lr0 = 1e200;
  c.momentum = 0.0;
  c.weight_decay = 0.5;
  try {
    train(c, d, Classifier::create(small_conv(), 1));
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    CHECK(e.log().size() == e.step());
    for (const auto& p : e.last_good().parameters()) {
      for (double v : p.values()) REQUIRE(std::isfinite(v));
    }
  }
}

TEST_CASE("configuration and data mismatches are rejected") {
  const Dataset d = noise_data(10, 8, 3, 8);
  TrainConfig c;
  c.iterations = 1;
  Architecture two = small_conv();
  two.classes = 2;
  CHECK_THROWS_AS(train(c, d, Classifier::create(two, 0)), std::invalid_argument);
  c.lr0 = 0.0;
  CHECK_THROWS_AS(train(c, d, Classifier::create(small_conv(), 0)), std::invalid_argument);
}

TEST_CASE("log csv") {
  const std::vector<TrainLogRow> log{{0, 0.1, 1.5, 1.5, 0.25, 3.0}, {1, 0.1, 1.25, 1.0, 0.25, 6.0}};
  const auto path = std::filesystem::temp_directory_path() / "invreg_test_log.csv";
  write_log_csv(log, path, false);
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "step,lr,total_loss,ce_term,reg_term");
  CHECK(first == "0,0.10000000000000001,1.5,1.5,0.25");
}
