#include <cmath>

#include "doctest.h"
#include "invreg/regularizers.hpp"

using namespace invreg;

namespace {

Architecture tiny_arch() {
  Architecture a;
  a.height = 8;
  a.width = 8;
  a.conv_widths = {3};
  a.dense_widths = {5};
  a.classes = 3;
  return a;
}

Tensor random_batch(std::size_t n, Rng& rng) {
  std::vector<double> v(n * 64);
  for (auto& x : v) x = rng.uniform();
  return Tensor({n, 8, 8, 1}, std::move(v));
}

Tensor image_at(const Tensor& batch, std::size_t i) {
  const auto v = batch.values();
  return Tensor({8, 8, 1}, std::vector<double>(v.begin() + i * 64, v.begin() + (i + 1) * 64));
}

// Every input maps to the same logits.
Classifier constant_model(std::vector<double> bias) {
  Classifier m = Classifier::create(tiny_arch(), 0);
  for (auto& p : m.parameters()) {
    auto v = p.mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  }
  auto b = m.parameters().back().mutable_values();
  std::copy(bias.begin(), bias.end(), b.begin());
  return m;
}

std::vector<AdversarialSet> search_all(const RegularizedObjective& obj, const SearchContext& ctx, const Tensor& batch,
                                       const std::vector<int>& labels, std::uint64_t seed) {
  std::vector<AdversarialSet> out;
  const SeedStream root = SeedStream(seed).named("defense");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.push_back(find_adversarial(obj, ctx, image_at(batch, i), labels[i], root.child(i)));
  }
  return out;
}

double scalar_of(Tape& tape, const Tensor& rows) { return ad::mean(tape, rows).item(); }

}  // namespace

TEST_CASE("objective strings round trip") {
  const char* texts[] = {"AT(rob,wo10)", "KL(rob,wo10)", "KL(mix,rnd)", "L2(nat,spgd)", "ALP(rob,wo1)",
                         "KLC(rob,spgd7)", "HDA(nat,rnd)", "HDA-KLx4(mix,wo20)", "HDAx2(rob,rnd)"};
  for (const char* t : texts) {
    const RegularizedObjective a = parse_objective(t, 0.3);
    CHECK(a.to_string() == t);
    CHECK(parse_objective(a.to_string(), 0.3) == a);
  }
  CHECK(parse_objective(" kl-c ( ROB , Wo-10 ) ").to_string() == "KLC(rob,wo10)");
  CHECK(parse_objective("HDA-L2(nat,rnd)").to_string() == "HDA(nat,rnd)");
  CHECK(parse_objective("HDA-L2x2(rob,rnd)").to_string() == "HDAx2(rob,rnd)");
  const auto rnd = parse_objective("AT(rob,rnd)");
  CHECK(rnd.defense.samples() == 1);
}

TEST_CASE("malformed objectives report a position") {
  struct Bad {
    const char* text;
    std::size_t pos;
  };
  const Bad cases[] = {{"XX(rob,wo10)", 0}, {"KL(rob wo10)", 7},  {"KL(foo,wo10)", 3},
                       {"KL(rob,wox)", 9},  {"KL(rob,wo0)", 10},  {"KL(rob,wo10", 11},
                       {"KL(rob,wo10)x", 12}, {"HDA-XY(rob,rnd)", 4}, {"KL(rob,spgd0)", 12}};
  for (const auto& b : cases) {
    try {
      parse_objective(b.text);
      FAIL("accepted " << b.text);
    } catch (const ObjectiveParseError& e) {
      CHECK_MESSAGE(e.position() == b.pos, b.text << ": " << e.what());
    }
  }
  CHECK_THROWS_AS(parse_objective("KL(rob,wo10)", -1.0), std::invalid_argument);
}

TEST_CASE("search plans") {
  auto plan = [](const char* t, double lambda, bool share = false) {
    auto o = parse_objective(t, lambda);
    o.share_adv_point = share;
    return plan_searches(o);
  };
  CHECK(plan("AT(rob,wo10)", 0).ce);
  CHECK_FALSE(plan("AT(rob,wo10)", 0).reg);
  CHECK_FALSE(plan("KL(nat,wo10)", 0).ce);
  CHECK(plan("KL(rob,wo10)", 1).ce);
  CHECK(plan("KL(rob,wo10)", 1).reg);
  CHECK_FALSE(plan("KL(rob,wo10)", 1, true).reg);
  CHECK_FALSE(plan("KL(nat,wo10)", 1).ce);
  CHECK(plan("ALP(nat,wo10)", 1).ce);
  CHECK(plan("HDA-KLx3(nat,rnd)", 1).random_draws == 3);
  CHECK(plan("HDA-KLx3(nat,rnd)", 0).random_draws == 0);
}

TEST_CASE("regularizer values on the two-class toy logits") {
  // Logits [theta, 0] against a clean [0, 0], theta in [-1, 1].
  Tape tape(Tape::Mode::Inference);
  const Tensor clean({1, 2}, {0.0, 0.0});
  const std::vector<int> label{0};
  double sup_l2 = 0.0, sup_kl = 0.0;
  for (int i = 0; i <= 40; ++i) {
    const double th = -1.0 + i * 0.05;
    const Tensor adv[] = {Tensor({1, 2}, {th, 0.0})};
    sup_l2 = std::max(sup_l2, scalar_of(tape, reg_value_rows(tape, {RegKind::L2}, clean, adv, label)));
    sup_kl = std::max(sup_kl, scalar_of(tape, reg_value_rows(tape, {RegKind::KL}, clean, adv, label)));
  }
  CHECK(sup_l2 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sup_kl == doctest::Approx(0.11094407167172735).epsilon(1e-12));
}

TEST_CASE("regularizer kinds evaluated on given logits") {
  Tape tape(Tape::Mode::Inference);
  const Tensor clean({2, 3}, {0.5, -1.0, 2.0, 0.0, 0.0, 1.0});
  const Tensor adv({2, 3}, {1.5, -1.0, 0.0, 0.0, 1.0, 1.0});
  const std::vector<int> labels{2, 1};
  const Tensor one[] = {adv};
  const Tensor same[] = {clean};
  const Tensor y = one_hot(labels, 3);

  const Tensor at = reg_value_rows(tape, {RegKind::AT}, clean, one, labels);
  const Tensor ce_adv = cross_entropy_rows(tape, adv, y), ce_clean = cross_entropy_rows(tape, clean, y);
  for (std::size_t i = 0; i < 2; ++i) CHECK(at.at(i) == ce_adv.at(i) - ce_clean.at(i));

  const Tensor kl = reg_value_rows(tape, {RegKind::KLC}, clean, one, labels);
  const Tensor ref = kl_div_rows(tape, adv, clean);
  for (std::size_t i = 0; i < 2; ++i) CHECK(kl.at(i) == ref.at(i));

  const Tensor hda[] = {adv, clean};
  const Tensor h = reg_value_rows(tape, {RegKind::HDA, Semimetric::L2, 2}, clean, hda, labels);
  const Tensor l2 = l2_logit_dist_rows(tape, adv, clean);
  for (std::size_t i = 0; i < 2; ++i) CHECK(h.at(i) == doctest::Approx(l2.at(i) / 2));

  for (auto kind : {RegKind::AT, RegKind::L2, RegKind::KL, RegKind::ALP, RegKind::KLC, RegKind::HDA}) {
    const Tensor z = reg_value_rows(tape, {kind}, clean, same, labels);
    for (double v : z.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("an input-independent classifier has zero regularizer and equal nat/rob losses") {
  const Classifier m = constant_model({0.3, -0.2, 1.0});
  Rng rng(1);
  const Tensor batch = random_batch(4, rng);
  const std::vector<int> labels{0, 1, 2, 1};
  SearchContext ctx{&m, build_search_set(30, 2, 8, 8), PaddingMode::constant()};

  double nat_loss = 0.0;
  {
    Tape tape;
    const auto obj = parse_objective("AT(nat,wo5)", 0.0);
    const auto adv = search_all(obj, ctx, batch, labels, 1);
    nat_loss = composed_loss(tape, obj, m, batch, labels, adv, ctx.pad).total.item();
  }
  for (const char* t : {"AT(rob,wo5)", "L2(rob,wo5)", "KL(mix,wo5)", "ALP(rob,rnd)", "KLC(rob,spgd)", "HDA-KLx2(nat,rnd)"}) {
    const auto obj = parse_objective(t, 1.0);
    const auto adv = search_all(obj, ctx, batch, labels, 2);
    Tape tape;
    const ComposedLoss l = composed_loss(tape, obj, m, batch, labels, adv, ctx.pad);
    CHECK_MESSAGE(l.reg_term == 0.0, t);
    CHECK_MESSAGE(l.total.item() == doctest::Approx(nat_loss).epsilon(1e-14), t);
  }
}

TEST_CASE("degenerate search set gives the identity point") {
  const Classifier m = Classifier::create(tiny_arch(), 5);
  Rng rng(2);
  const Tensor batch = random_batch(1, rng);
  SearchContext ctx{&m, build_search_set(0, 0, 8, 8), PaddingMode::constant()};
  for (const char* t : {"AT(rob,wo10)", "KL(rob,spgd)", "KL(rob,wo10)"}) {
    const auto a = find_adversarial(parse_objective(t, 1.0), ctx, image_at(batch, 0), 1, SeedStream(3));
    REQUIRE(a.ce);
    CHECK(*a.ce == TransformParams::identity());
  }
}

TEST_CASE("robust batch dominates natural batch when the identity is a candidate") {
  const Classifier m = Classifier::create(tiny_arch(), 6);
  Rng rng(3);
  const Tensor batch = random_batch(6, rng);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  SearchContext ctx{&m, build_search_set(30, 2, 8, 8), PaddingMode::constant()};
  const auto rob = parse_objective("AT(rob,wo8)", 0.0);
  const auto nat = parse_objective("AT(nat,wo8)", 0.0);
  const auto adv = search_all(rob, ctx, batch, labels, 4);
  Tape tape;
  const double r = composed_loss(tape, rob, m, batch, labels, adv, ctx.pad).total.item();
  const double n = composed_loss(tape, nat, m, batch, labels, adv, ctx.pad).total.item();
  CHECK(r >= n);
}

TEST_CASE("composed loss is affine in lambda with the mean regularizer as slope") {
  const Classifier m = Classifier::create(tiny_arch(), 7);
  Rng rng(4);
  const Tensor batch = random_batch(5, rng);
  const std::vector<int> labels{2, 1, 0, 0, 1};
  SearchContext ctx{&m, build_search_set(30, 2, 8, 8), PaddingMode::constant()};
  for (const char* t : {"KL(rob,wo6)", "L2(mix,wo6)", "ALP(rob,wo6)", "KLC(nat,wo6)", "HDA(nat,rnd)", "AT(rob,wo6)"}) {
    const auto base = parse_objective(t, 1.0);
    const auto adv = search_all(base, ctx, batch, labels, 5);
    double prev = -1.0, ce0 = 0.0, reg0 = 0.0;
    for (double lambda : {0.5, 1.0, 2.0, 4.0}) {
      auto obj = base;
      obj.lambda = lambda;
      Tape tape;
      const ComposedLoss l = composed_loss(tape, obj, m, batch, labels, adv, ctx.pad);
      if (prev < 0.0) ce0 = l.ce_term, reg0 = l.reg_term;
      CHECK(l.ce_term == ce0);
      CHECK(l.reg_term == reg0);
      CHECK(l.total.item() == doctest::Approx(ce0 + lambda * reg0).epsilon(1e-13));
      CHECK(l.reg_term >= 0.0);
      prev = l.total.item();
    }
  }
}

TEST_CASE("composed loss gradients with respect to parameters match central differences") {
  const Classifier base = Classifier::create(tiny_arch(), 8);
  Rng rng(5);
  const Tensor batch = random_batch(3, rng);
  const std::vector<int> labels{0, 2, 1};
  SearchContext ctx{&base, build_search_set(20, 1, 8, 8), PaddingMode::constant()};
  for (const char* t : {"KL(mix,wo4)", "AT(rob,wo4)", "HDA-KLx2(nat,rnd)", "ALP(rob,wo4)"}) {
    const auto obj = parse_objective(t, 0.7);
    const auto adv = search_all(obj, ctx, batch, labels, 6);
    for (std::size_t pi : {std::size_t{2}, base.parameters().size() - 1}) {
      auto f = [&](Tape& tape, const Tensor& v) {
        Classifier m = base.clone();
        m.parameters()[pi] = v;
        return composed_loss(tape, obj, m, batch, labels, adv, ctx.pad).total;
      };
      const auto r = finite_difference_check(f, base.parameters()[pi], 1e-6);
      CHECK_MESSAGE(r.max_relative_error < 1e-4, t << " param " << pi);
    }
  }
}

TEST_CASE("lambda zero adversarial training has exactly the plain adversarial gradient") {
  Classifier m = Classifier::create(tiny_arch(), 9);
  Rng rng(6);
  const Tensor batch = random_batch(4, rng);
  const std::vector<int> labels{1, 0, 2, 2};
  SearchContext ctx{&m, build_search_set(30, 2, 8, 8), PaddingMode::constant()};
  const auto obj = parse_objective("AT(rob,wo10)", 0.0);
  const auto adv = search_all(obj, ctx, batch, labels, 7);

  auto grads = [&]() {
    std::vector<double> g;
    for (const auto& p : m.parameters()) g.insert(g.end(), p.grad().begin(), p.grad().end());
    return g;
  };
  m.zero_grad();
  {
    Tape tape;
    tape.backward(composed_loss(tape, obj, m, batch, labels, adv, ctx.pad).total);
  }
  const auto composed = grads();
  m.zero_grad();
  {
    std::vector<TransformParams> ds;
    for (const auto& a : adv) ds.push_back(*a.ce);
    Tape tape;
    const Tensor logits = m.logits(tape, warp_batch(batch, ds, ctx.pad));
    tape.backward(cross_entropy(tape, logits, one_hot(labels, 3)));
  }
  CHECK(composed == grads());
}

TEST_CASE("separate and shared regularizer points") {
  const Classifier m = Classifier::create(tiny_arch(), 10);
  Rng rng(7);
  const Tensor batch = random_batch(3, rng);
  const std::vector<int> labels{0, 1, 2};
  SearchContext ctx{&m, build_search_set(30, 2, 8, 8), PaddingMode::constant()};
  auto own = parse_objective("KL(rob,wo10)", 1.0);
  auto shared = own;
  shared.share_adv_point = true;
  const auto a_own = search_all(own, ctx, batch, labels, 8);
  const auto a_shared = search_all(shared, ctx, batch, labels, 8);
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(a_own[i].reg);
    CHECK_FALSE(a_shared[i].reg);
    // Both searches run on the same candidates, so the CE points agree.
    CHECK(*a_own[i].ce == *a_shared[i].ce);
  }
  Tape tape;
  const double r_own = composed_loss(tape, own, m, batch, labels, a_own, ctx.pad).reg_term;
  const double r_shared = composed_loss(tape, shared, m, batch, labels, a_shared, ctx.pad).reg_term;
  CHECK(r_own >= r_shared);
}
