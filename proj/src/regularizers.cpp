#include "invreg/regularizers.hpp"

#include <cctype>
#include <cmath>
#include <limits>

namespace invreg {

std::string RegularizerKind::to_string() const {
  switch (kind) {
    case RegKind::AT:
      return "AT";
    case RegKind::L2:
      return "L2";
    case RegKind::KL:
      return "KL";
    case RegKind::ALP:
      return "ALP";
    case RegKind::KLC:
      return "KLC";
    case RegKind::HDA: {
      std::string s = "HDA";
      if (h == Semimetric::KL) s += "-KL";
      if (draws != 1) s += "x" + std::to_string(draws);
      return s;
    }
  }
  return "?";
}

std::string to_string(BatchMode mode) {
  switch (mode) {
    case BatchMode::Nat:
      return "nat";
    case BatchMode::Rob:
      return "rob";
    case BatchMode::Mix:
      return "mix";
  }
  return "?";
}

std::string RegularizedObjective::to_string() const {
  return reg.to_string() + "(" + invreg::to_string(batch) + "," + defense.to_string() + ")";
}

void RegularizedObjective::validate() const {
  if (!std::isfinite(lambda) || lambda < 0.0) throw std::invalid_argument("objective: lambda must be finite and nonnegative");
  if (reg.kind == RegKind::HDA && reg.draws == 0) throw std::invalid_argument("objective: HDA needs at least one draw");
  if (defense.kind == DefenseSpec::Kind::WoK && defense.k == 0) throw std::invalid_argument("objective: wo-k needs k >= 1");
  if (defense.kind == DefenseSpec::Kind::SPGD && defense.steps == 0) throw std::invalid_argument("objective: spgd needs steps >= 1");
}

// ---------------------------------------------------------------------------
// Parser

ObjectiveParseError::ObjectiveParseError(const std::string& text, std::size_t position, const std::string& message)
    : std::invalid_argument("objective '" + text + "', position " + std::to_string(position) + ": " + message),
      position_(position) {}

namespace {

class Cursor {
 public:
  explicit Cursor(const std::string& text) : text_(text) {}

  void skip_spaces() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }
  bool at_end() {
    skip_spaces();
    return pos_ >= text_.size();
  }
  std::size_t pos() const { return pos_; }

  /// Consumes `word` (case-insensitive) if it is next.
  bool accept(std::string_view word) {
    skip_spaces();
    if (text_.size() - pos_ < word.size()) return false;
    for (std::size_t i = 0; i < word.size(); ++i) {
      if (std::tolower(static_cast<unsigned char>(text_[pos_ + i])) != std::tolower(static_cast<unsigned char>(word[i]))) {
        return false;
      }
    }
    pos_ += word.size();
    return true;
  }
  void expect(std::string_view word) {
    if (!accept(word)) fail("expected '" + std::string(word) + "'");
  }
  std::optional<std::size_t> number() {
    skip_spaces();
    const std::size_t start = pos_;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    if (pos_ == start) return std::nullopt;
    if (pos_ - start > 9) fail("number too large");
    return std::stoul(text_.substr(start, pos_ - start));
  }
  [[noreturn]] void fail(const std::string& message) const { throw ObjectiveParseError(text_, pos_, message); }

 private:
  const std::string& text_;
  std::size_t pos_ = 0;
};

std::size_t positive(Cursor& c, const char* what) {
  auto n = c.number();
  if (!n) c.fail(std::string("expected ") + what);
  if (*n == 0) c.fail(std::string(what) + " must be positive");
  return *n;
}

}  // namespace

RegularizedObjective parse_objective(const std::string& text, double lambda) {
  Cursor c(text);
  RegularizedObjective obj;
  obj.lambda = lambda;
  if (c.accept("HDA")) {
    obj.reg.kind = RegKind::HDA;
    if (c.accept("-")) {
      if (c.accept("L2")) obj.reg.h = Semimetric::L2;
      else if (c.accept("KL")) obj.reg.h = Semimetric::KL;
      else c.fail("expected semimetric L2 or KL");
    }
    if (c.accept("x")) obj.reg.draws = positive(c, "draw count");
  } else if (c.accept("ALP")) {
    obj.reg.kind = RegKind::ALP;
  } else if (c.accept("KLC") || c.accept("KL-C")) {
    obj.reg.kind = RegKind::KLC;
  } else if (c.accept("KL")) {
    obj.reg.kind = RegKind::KL;
  } else if (c.accept("L2")) {
    obj.reg.kind = RegKind::L2;
  } else if (c.accept("AT")) {
    obj.reg.kind = RegKind::AT;
  } else {
    c.fail("expected regularizer AT, L2, KL, ALP, KLC or HDA");
  }

  c.expect("(");
  if (c.accept("nat")) obj.batch = BatchMode::Nat;
  else if (c.accept("rob")) obj.batch = BatchMode::Rob;
  else if (c.accept("mix")) obj.batch = BatchMode::Mix;
  else c.fail("expected batch mode nat, rob or mix");
  c.expect(",");
  if (c.accept("rnd")) {
    obj.defense = DefenseSpec::rnd();
  } else if (c.accept("spgd") || c.accept("s-pgd")) {
    auto steps = c.number();
    if (steps && *steps == 0) c.fail("spgd steps must be positive");
    obj.defense = DefenseSpec::spgd(steps.value_or(5));
  } else if (c.accept("wo")) {
    c.accept("-");
    obj.defense = DefenseSpec::wok(positive(c, "candidate count after 'wo'"));
  } else {
    c.fail("expected defense rnd, woK or spgd");
  }
  c.expect(")");
  if (!c.at_end()) c.fail("unexpected trailing characters");
  obj.validate();
  return obj;
}

// ---------------------------------------------------------------------------

SearchPlan plan_searches(const RegularizedObjective& objective) {
  SearchPlan plan;
  const bool active = objective.lambda != 0.0;
  const auto kind = objective.reg.kind;
  const bool own_search = kind == RegKind::L2 || kind == RegKind::KL;
  plan.ce = objective.batch != BatchMode::Nat ||
            (active && (kind == RegKind::AT || kind == RegKind::ALP || kind == RegKind::KLC ||
                        (own_search && objective.share_adv_point)));
  plan.reg = active && own_search && !objective.share_adv_point;
  plan.random_draws = active && kind == RegKind::HDA ? objective.reg.draws : 0;
  return plan;
}

namespace {

SearchObjective reg_search(RegKind kind) { return kind == RegKind::KL ? SearchObjective::KL : SearchObjective::L2; }

}  // namespace

AdversarialPoint adversarial_point(const SearchContext& ctx, const Tensor& image, int label,
                                   SearchObjective search, const DefenseSpec& defense, const SeedStream& stream) {
  const SearchObjective objs[] = {search};
  return defend(ctx, defense, image, label, objs, stream).front();
}

AdversarialSet find_adversarial(const RegularizedObjective& objective, const SearchContext& ctx,
                                const Tensor& image, int label, const SeedStream& stream) {
  const SearchPlan plan = plan_searches(objective);
  std::vector<SearchObjective> objs;
  if (plan.ce) objs.push_back(SearchObjective::CE);
  if (plan.reg) objs.push_back(reg_search(objective.reg.kind));
  AdversarialSet out;
  if (!objs.empty()) {
    std::vector<TransformParams> found(objs.size());
    if (!ctx.set.degenerate()) {
      const auto points = defend(ctx, objective.defense, image, label, objs, stream.named("search"));
      for (std::size_t i = 0; i < objs.size(); ++i) found[i] = points[i].delta;
    }
    std::size_t next = 0;
    if (plan.ce) out.ce = found[next++];
    if (plan.reg) out.reg = found[next++];
  }
  if (plan.random_draws) {
    Rng rng(stream.named("draws"));
    for (std::size_t d = 0; d < plan.random_draws; ++d) out.draws.push_back(ctx.set.sample(rng));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Tensor semimetric_rows(Tape& tape, Semimetric h, const Tensor& adv, const Tensor& clean) {
  return h == Semimetric::KL ? kl_div_rows(tape, adv, clean) : l2_logit_dist_rows(tape, adv, clean);
}

}  // namespace

Tensor reg_value_rows(Tape& tape, const RegularizerKind& kind, const Tensor& clean_logits,
                      std::span<const Tensor> adv_logits, std::span<const int> labels) {
  if (adv_logits.empty()) throw std::invalid_argument("reg_value: no adversarial logits");
  switch (kind.kind) {
    case RegKind::AT: {
      const Tensor y = one_hot(labels, clean_logits.dim(1));
      return ad::sub(tape, cross_entropy_rows(tape, adv_logits[0], y), cross_entropy_rows(tape, clean_logits, y));
    }
    case RegKind::L2:
    case RegKind::ALP:
      return l2_logit_dist_rows(tape, adv_logits[0], clean_logits);
    case RegKind::KL:
    case RegKind::KLC:
      return kl_div_rows(tape, adv_logits[0], clean_logits);
    case RegKind::HDA: {
      Tensor acc = semimetric_rows(tape, kind.h, adv_logits[0], clean_logits);
      for (std::size_t d = 1; d < adv_logits.size(); ++d) {
        acc = ad::add(tape, acc, semimetric_rows(tape, kind.h, adv_logits[d], clean_logits));
      }
      return adv_logits.size() == 1 ? acc : ad::scale(tape, acc, 1.0 / static_cast<double>(adv_logits.size()));
    }
  }
  throw std::logic_error("reg_value: unknown kind");
}

Tensor reg_value(Tape& tape, const RegularizerKind& kind, const Tensor& clean_logits,
                 std::span<const Tensor> adv_logits, std::span<const int> labels) {
  return ad::mean(tape, reg_value_rows(tape, kind, clean_logits, adv_logits, labels));
}

namespace {

std::vector<TransformParams> collect(std::span<const AdversarialSet> adv,
                                     const std::optional<TransformParams> AdversarialSet::*member, const char* what) {
  std::vector<TransformParams> out;
  out.reserve(adv.size());
  for (const auto& a : adv) {
    if (!(a.*member)) throw std::invalid_argument(std::string("composed_loss: missing ") + what + " point");
    out.push_back(*(a.*member));
  }
  return out;
}

}  // namespace

ComposedLoss composed_loss(Tape& tape, const RegularizedObjective& objective, const Classifier& model,
                           const Tensor& images, std::span<const int> labels,
                           std::span<const AdversarialSet> adversarial, PaddingMode pad) {
  if (images.rank() != 4 || images.dim(0) != labels.size() || adversarial.size() != labels.size()) {
    throw ShapeError("composed_loss", images.shape(), "batch, labels and adversarial sets must agree");
  }
  const bool active = objective.lambda != 0.0;
  const auto kind = objective.reg.kind;
  const Tensor y = one_hot(labels, model.classes());

  Tensor clean, adv_ce;
  auto clean_logits = [&]() -> const Tensor& {
    if (!clean.defined()) clean = model.logits(tape, images);
    return clean;
  };
  auto adv_ce_logits = [&]() -> const Tensor& {
    if (!adv_ce.defined()) adv_ce = model.logits(tape, warp_batch(images, collect(adversarial, &AdversarialSet::ce, "CE"), pad));
    return adv_ce;
  };

  Tensor ce_term;
  switch (objective.batch) {
    case BatchMode::Nat:
      ce_term = cross_entropy(tape, clean_logits(), y);
      break;
    case BatchMode::Rob:
      ce_term = cross_entropy(tape, adv_ce_logits(), y);
      break;
    case BatchMode::Mix:
      ce_term = ad::scale(tape, ad::add(tape, cross_entropy(tape, clean_logits(), y), cross_entropy(tape, adv_ce_logits(), y)), 0.5);
      break;
  }

  ComposedLoss out;
  out.ce_term = ce_term.item();
  if (active) {
    std::vector<Tensor> adv;
    if (kind == RegKind::HDA) {
      const std::size_t draws = objective.reg.draws;
      for (std::size_t d = 0; d < draws; ++d) {
        std::vector<TransformParams> deltas;
        for (const auto& a : adversarial) {
          if (a.draws.size() != draws) throw std::invalid_argument("composed_loss: missing HDA draws");
          deltas.push_back(a.draws[d]);
        }
        adv.push_back(model.logits(tape, warp_batch(images, deltas, pad)));
      }
    } else if ((kind == RegKind::L2 || kind == RegKind::KL) && !objective.share_adv_point) {
      adv.push_back(model.logits(tape, warp_batch(images, collect(adversarial, &AdversarialSet::reg, "regularizer"), pad)));
    } else {
      adv.push_back(adv_ce_logits());
    }
    const Tensor reg = reg_value(tape, objective.reg, clean_logits(), adv, labels);
    out.reg_term = reg.item();
    out.total = ad::add(tape, ce_term, ad::scale(tape, reg, objective.lambda));
  } else {
    out.total = ce_term;
    // Reported only: evaluated off the graph from the points at hand.
    const bool has_point = kind == RegKind::AT || kind == RegKind::ALP || kind == RegKind::KLC ||
                           ((kind == RegKind::L2 || kind == RegKind::KL) && objective.share_adv_point);
    if (has_point && adversarial.front().ce) {
      Tape off(Tape::Mode::Inference);
      const Tensor c = clean.defined() ? clean.detach() : model.logits(images);
      const Tensor a[] = {adv_ce_logits().detach()};
      out.reg_term = reg_value(off, objective.reg, c, a, labels).item();
    } else {
      out.reg_term = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return out;
}

}  // namespace invreg
