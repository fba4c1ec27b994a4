#include "units/tuning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

namespace units {

namespace {

constexpr double kMinBandwidth = 0.05;

double clamp01(double u) { return std::clamp(u, 0.0, 1.0); }

double normal_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

double normal_cdf(double x, double mu, double sigma) {
  return 0.5 * std::erfc(-(x - mu) / (sigma * std::numbers::sqrt2));
}

// Parzen density on [0,1]: a broad prior kernel at 0.5 plus one truncated
// Gaussian per observation, equal weights. Each kernel is as wide as the
// larger gap to its sorted neighbours, clipped to [1/min(100, n+1), 1].
struct Parzen {
  std::vector<double> centres;
  std::vector<double> sigmas;

  explicit Parzen(const std::vector<double>& points) {
    centres = points;
    centres.push_back(0.5);
    std::vector<std::size_t> order(centres.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return centres[a] < centres[b]; });
    const double floor = 1.0 / std::min(100.0, static_cast<double>(centres.size()));
    sigmas.assign(centres.size(), 1.0);
    for (std::size_t r = 0; r < order.size(); ++r) {
      const double left = r == 0 ? centres[order[r]] : centres[order[r]] - centres[order[r - 1]];
      const double right = r + 1 == order.size() ? 1.0 - centres[order[r]] : centres[order[r + 1]] - centres[order[r]];
      sigmas[order[r]] = std::clamp(std::max(left, right), std::max(floor, kMinBandwidth), 1.0);
    }
    sigmas.back() = 1.0;  // prior
  }

  double density(double u) const {
    const double w = 1.0 / static_cast<double>(centres.size());
    double p = 0.0;
    for (std::size_t k = 0; k < centres.size(); ++k)
      p += w * normal_pdf(u, centres[k], sigmas[k]) /
           (normal_cdf(1.0, centres[k], sigmas[k]) - normal_cdf(0.0, centres[k], sigmas[k]));
    return p;
  }

  double sample(Rng& rng) const {
    std::uniform_int_distribution<std::size_t> pick(0, centres.size() - 1);
    const std::size_t k = pick(rng);
    std::normal_distribution<double> g(centres[k], sigmas[k]);
    for (int tries = 0; tries < 100; ++tries) {
      const double u = g(rng);
      if (u >= 0.0 && u <= 1.0) return u;
    }
    return clamp01(centres[k]);
  }
};

// Categorical density with add-one smoothing.
struct Counts {
  std::vector<double> p;

  Counts(const std::vector<int>& picks, std::size_t k) : p(k, 1.0) {
    for (int i : picks) p[static_cast<std::size_t>(i)] += 1.0;
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& v : p) v /= total;
  }

  int sample(Rng& rng) const {
    std::discrete_distribution<int> d(p.begin(), p.end());
    return d(rng);
  }
};

std::string valid_keys(const Json& table) {
  std::string out;
  for (auto it = table.begin(); it != table.end(); ++it) out += (out.empty() ? "" : ", ") + it.key();
  return out;
}

Json parse_like(const Json& like, const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    if (like.is_number_integer() || like.is_number_unsigned()) {
      const long v = std::stol(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    }
    if (like.is_number_float() || (like.is_null() && key == "hybrid_weight")) {
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    }
  } catch (const std::logic_error&) {
    throw ParameterError("override " + key + "=" + text + " is not a number");
  }
  return text;
}

std::string augmentations_string(const std::vector<Augmentation>& augs) {
  std::string out;
  for (const Augmentation& a : augs) out += (out.empty() ? "" : ",") + to_string(a);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Search space

Dimension Dimension::real(std::string name, double low, double high, bool log) {
  Dimension d{std::move(name), Kind::real, low, high, log, {}};
  d.validate();
  return d;
}

Dimension Dimension::integer(std::string name, long low, long high, bool log) {
  Dimension d{std::move(name), Kind::integer, static_cast<double>(low), static_cast<double>(high), log, {}};
  d.validate();
  return d;
}

Dimension Dimension::categorical(std::string name, std::vector<std::string> choices) {
  Dimension d{std::move(name), Kind::categorical, 0.0, 1.0, false, std::move(choices)};
  d.validate();
  return d;
}

void Dimension::validate() const {
  require(!name.empty(), "search dimension needs a name");
  if (kind == Kind::categorical) {
    require(!choices.empty(), "categorical dimension '" + name + "' has no choices");
    return;
  }
  require(std::isfinite(low) && std::isfinite(high) && low <= high, "dimension '" + name + "' has an empty range");
  if (log) require(low > 0.0, "log dimension '" + name + "' must be strictly positive");
}

double Dimension::encode(const Json& value) const {
  if (kind == Kind::categorical) {
    const auto it = std::find(choices.begin(), choices.end(), value.get<std::string>());
    if (it == choices.end()) throw ParameterError("'" + value.get<std::string>() + "' is not a choice of " + name);
    return static_cast<double>(it - choices.begin());
  }
  double lo = low, hi = high, x = value.get<double>();
  if (kind == Kind::integer) {
    lo -= 0.5;
    hi += 0.5;
  }
  if (log) {
    lo = std::log(std::max(lo, low * 0.5));
    hi = std::log(hi);
    x = std::log(x);
  }
  return hi > lo ? clamp01((x - lo) / (hi - lo)) : 0.5;
}

Json Dimension::decode(double u) const {
  if (kind == Kind::categorical) {
    const auto i = std::min(choices.size() - 1, static_cast<std::size_t>(std::max(0.0, u)));
    return choices[i];
  }
  u = clamp01(u);
  double lo = low, hi = high;
  if (kind == Kind::integer) {
    lo -= 0.5;
    hi += 0.5;
  }
  double x;
  if (log) {
    const double llo = std::log(std::max(lo, low * 0.5));
    x = std::exp(llo + u * (std::log(hi) - llo));
  } else {
    x = lo + u * (hi - lo);
  }
  if (kind == Kind::integer) return static_cast<long>(std::clamp(std::round(x), low, high));
  return std::clamp(x, low, high);
}

SearchSpace::SearchSpace(std::vector<Dimension> dims) {
  for (Dimension& d : dims) add(std::move(d));
}

SearchSpace& SearchSpace::add(Dimension dim) {
  dim.validate();
  for (const Dimension& d : dims_)
    require(d.name != dim.name, "duplicate search dimension '" + dim.name + "'");
  dims_.push_back(std::move(dim));
  return *this;
}

void SearchSpace::validate() const {
  require(!dims_.empty(), "search space is empty");
  for (const Dimension& d : dims_) d.validate();
}

// ---------------------------------------------------------------------------
// Proposers

Json RandomProposer::propose(const SearchSpace& space, const std::vector<TuningRecord>&, Rng& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Json config = Json::object();
  for (const Dimension& d : space.dimensions()) {
    if (d.kind == Dimension::Kind::categorical) {
      std::uniform_int_distribution<std::size_t> pick(0, d.choices.size() - 1);
      config[d.name] = d.choices[pick(rng)];
    } else {
      config[d.name] = d.decode(uni(rng));
    }
  }
  return config;
}

TpeProposer::TpeProposer(int startup, double gamma, int candidates)
    : startup_(std::max(1, startup)), gamma_(gamma), candidates_(candidates) {
  require(gamma > 0.0 && gamma < 1.0, "TPE gamma must lie in (0,1)");
  require(candidates >= 1, "TPE needs at least one candidate");
}

Json TpeProposer::propose(const SearchSpace& space, const std::vector<TuningRecord>& history, Rng& rng) {
  std::vector<const TuningRecord*> ok;
  for (const TuningRecord& r : history)
    if (!r.failed) ok.push_back(&r);
  if (static_cast<int>(history.size()) < startup_ || ok.size() < 2) return RandomProposer{}.propose(space, history, rng);

  std::stable_sort(ok.begin(), ok.end(), [](const auto* a, const auto* b) { return a->value < b->value; });
  const auto n_good = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(gamma_ * static_cast<double>(ok.size()))));
  const std::vector<const TuningRecord*> good(ok.begin(), ok.begin() + static_cast<std::ptrdiff_t>(n_good));
  const std::vector<const TuningRecord*> bad(ok.begin() + static_cast<std::ptrdiff_t>(n_good), ok.end());

  // Dimensions are modelled independently.
  Json config = Json::object();
  for (const Dimension& d : space.dimensions()) {
    auto coords = [&](const std::vector<const TuningRecord*>& rs) {
      std::vector<double> u;
      for (const auto* r : rs) u.push_back(d.encode(r->config.at(d.name)));
      return u;
    };
    if (d.kind == Dimension::Kind::categorical) {
      auto to_int = [](const std::vector<double>& v) { return std::vector<int>(v.begin(), v.end()); };
      const Counts l(to_int(coords(good)), d.choices.size());
      const Counts g(to_int(coords(bad)), d.choices.size());
      int best = 0;
      double best_ratio = -1.0;
      for (int c = 0; c < candidates_; ++c) {
        const int i = l.sample(rng);
        const double ratio = l.p[static_cast<std::size_t>(i)] / g.p[static_cast<std::size_t>(i)];
        if (ratio > best_ratio) best_ratio = ratio, best = i;
      }
      config[d.name] = d.choices[static_cast<std::size_t>(best)];
    } else {
      const Parzen l(coords(good));
      const Parzen g(coords(bad));
      double best = 0.5, best_ratio = -1.0;
      for (int c = 0; c < candidates_; ++c) {
        const double u = l.sample(rng);
        const double ratio = l.density(u) / g.density(u);
        if (ratio > best_ratio) best_ratio = ratio, best = u;
      }
      config[d.name] = d.decode(best);
    }
  }
  return config;
}

// ---------------------------------------------------------------------------
// Optimisation loop

Json to_json(const TuningRecord& r) {
  Json j{{"trial", r.trial}, {"config", r.config}, {"wall_seconds", r.wall_seconds}, {"failed", r.failed}};
  j["value"] = r.failed ? Json(nullptr) : Json(r.value);
  if (r.failed) j["error"] = r.error;
  return j;
}

void write_records_jsonl(std::ostream& out, const std::vector<TuningRecord>& records) {
  for (const TuningRecord& r : records) out << to_json(r).dump() << '\n';
}

TuningResult optimize(const Objective& objective, const SearchSpace& space, int budget, std::uint64_t seed,
                      Proposer& proposer) {
  require(budget >= 1, "tuning budget must be >= 1");
  space.validate();
  Rng rng(seed);
  TuningResult result;
  bool have_best = false;
  for (int trial = 0; trial < budget; ++trial) {
    TuningRecord rec;
    rec.trial = trial;
    rec.config = proposer.propose(space, result.records, rng);
    const auto start = std::chrono::steady_clock::now();
    try {
      rec.value = objective(rec.config);
      if (!std::isfinite(rec.value)) {
        rec.failed = true;
        rec.error = "non-finite objective";
      }
    } catch (const std::exception& e) {
      rec.failed = true;
      rec.error = e.what();
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!rec.failed && (!have_best || rec.value < result.best_value)) {
      result.best = rec.config;
      result.best_value = rec.value;
      have_best = true;
    }
    result.records.push_back(std::move(rec));
  }
  if (!have_best) throw Error("every tuning trial failed; first error: " + result.records.front().error);
  return result;
}

TuningResult bayes_optimize(const Objective& objective, const SearchSpace& space, int budget, std::uint64_t seed) {
  TpeProposer tpe(std::max(1, budget / 4));
  return optimize(objective, space, budget, seed, tpe);
}

TuningResult random_search(const Objective& objective, const SearchSpace& space, int budget, std::uint64_t seed) {
  RandomProposer random;
  return optimize(objective, space, budget, seed, random);
}

// ---------------------------------------------------------------------------
// Pre-training configs

std::string to_string(TuningMode mode) {
  switch (mode) {
    case TuningMode::default_mode:
      return "default";
    case TuningMode::manual:
      return "manual";
    case TuningMode::smart:
      return "smart";
  }
  return "default";
}

TuningMode parse_tuning_mode(const std::string& name) {
  if (name == "default") return TuningMode::default_mode;
  if (name == "manual") return TuningMode::manual;
  if (name == "smart") return TuningMode::smart;
  throw ParameterError("unknown tuning mode '" + name + "' (expected default, manual or smart)");
}

Json table_from_config(const PretrainTemplateConfig& c) {
  Json enc = to_json(c.encoder);
  Json t{{"architecture", enc["architecture"]},
         {"depth", c.encoder.depth},
         {"hidden_width", c.encoder.hidden_width},
         {"repr_dim", c.encoder.repr_dim},
         {"kernel_size", c.encoder.kernel_size},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"temperature", c.temperature},
         {"masking_rate", c.masking_rate},
         {"mask_geometry", to_json(c)["mask_geometry"]},
         {"augmentations", augmentations_string(c.augmentations)},
         {"n_negatives", c.n_negatives},
         {"seed", static_cast<long>(c.seed)}};
  t["hybrid_weight"] = c.hybrid_weight ? Json(*c.hybrid_weight) : Json(nullptr);
  return t;
}

Json default_table(TemplateFamily family) { return table_from_config(PretrainTemplateConfig::defaults(family)); }

Json apply_overrides(Json table, const std::map<std::string, std::string>& overrides) {
  for (const auto& [key, text] : overrides) {
    if (!table.contains(key))
      throw ParameterError("unknown config key '" + key + "'; valid keys: " + valid_keys(table));
    table[key] = parse_like(table[key], key, text);
  }
  return table;
}

PretrainTemplateConfig config_from_table(TemplateFamily family, const Json& table, int input_dims) {
  for (auto it = table.begin(); it != table.end(); ++it)
    if (!default_table(family).contains(it.key()))
      throw ParameterError("unknown config key '" + it.key() + "'; valid keys: " + valid_keys(default_table(family)));
  PretrainTemplateConfig c = PretrainTemplateConfig::defaults(family, input_dims);
  if (table.contains("augmentations")) {
    c.augmentations.clear();
    std::stringstream ss(table["augmentations"].get<std::string>());
    for (std::string item; std::getline(ss, item, ',');)
      if (!item.empty()) c.augmentations.push_back(parse_augmentation(item));
  }
  Json j = to_json(c);
  Json& enc = j["encoder"];
  for (const char* k : {"architecture", "depth", "hidden_width", "repr_dim", "kernel_size"})
    if (table.contains(k)) enc[k] = table[k];
  for (const char* k : {"epochs", "batch_size", "learning_rate", "temperature", "masking_rate", "mask_geometry",
                        "n_negatives", "seed", "hybrid_weight"})
    if (table.contains(k)) j[k] = table[k];
  try {
    return template_config_from_json(j);
  } catch (const FormatError& e) {
    throw ParameterError(e.what());
  }
}

SearchSpace default_search_space(TemplateFamily family) {
  SearchSpace s;
  s.add(Dimension::real("learning_rate", 1e-4, 1e-2, true));
  s.add(Dimension::integer("repr_dim", 16, 128, true));
  switch (family) {
    case TemplateFamily::contrastive_series:
    case TemplateFamily::contrastive_timestamp:
      s.add(Dimension::real("temperature", 0.05, 1.0, true));
      break;
    case TemplateFamily::contrastive_subsequence:
      s.add(Dimension::integer("n_negatives", 1, 20));
      break;
    case TemplateFamily::autoregressive_mask:
      s.add(Dimension::real("masking_rate", 0.05, 0.5));
      break;
    case TemplateFamily::hybrid:
      s.add(Dimension::real("hybrid_weight", 0.0, 1.0));
      s.add(Dimension::real("masking_rate", 0.05, 0.5));
      break;
  }
  return s;
}

Objective holdout_pretrain_objective(TemplateFamily family, const TimeSeriesDataset& data, std::uint64_t seed) {
  require(data.size() >= 5, "smart tuning needs at least 5 samples for a holdout split");
  std::vector<int> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(seed);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  const auto n_hold = std::max<std::size_t>(2, order.size() / 5);
  const std::vector<int> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  const std::vector<int> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  const TimeSeriesDataset train_set = data.subset(train);
  const TimeSeriesDataset hold_set = data.subset(hold);

  return [family, train_set, hold_set, seed](const Json& table) {
    const PretrainTemplateConfig cfg = config_from_table(family, table, train_set.channels());
    const PretrainedInstance inst = fit(cfg, train_set);
    Rng rng(seed ^ 0x5eedULL);
    double total = 0.0;
    int count = 0;
    for (const std::vector<int>& batch : make_batches(hold_set.size(), cfg.batch_size, rng, false)) {
      std::vector<const Matrix*> xs;
      for (int i : batch) xs.push_back(&hold_set.sample(i));
      ad::Tape tape;
      const Binding enc = bind(tape, inst.encoder().parameters(), false);
      const Binding head = bind(tape, inst.head(), false);
      total += inst.objective(enc, head, xs, rng).scalar() * static_cast<double>(batch.size());
      count += static_cast<int>(batch.size());
    }
    return total / count;
  };
}

ResolvedConfig resolve_config(TuningMode mode, TemplateFamily family, const std::map<std::string, std::string>& overrides,
                              const TimeSeriesDataset& data, const SearchSpace& space, int budget, std::uint64_t seed,
                              Objective objective) {
  const int dims = data.empty() ? 1 : data.channels();
  if (mode == TuningMode::default_mode) {
    require(overrides.empty(), "default mode takes no overrides; use manual mode");
    return {PretrainTemplateConfig::defaults(family, dims), {}};
  }
  const Json base = apply_overrides(default_table(family), overrides);
  if (mode == TuningMode::manual) return {config_from_table(family, base, dims), {}};

  const SearchSpace candidates = space.empty() ? default_search_space(family) : space;
  SearchSpace searched;
  for (const Dimension& d : candidates.dimensions()) {
    if (!base.contains(d.name))
      throw ParameterError("unknown search key '" + d.name + "'; valid keys: " + valid_keys(base));
    if (!overrides.contains(d.name)) searched.add(d);
  }
  if (searched.empty()) return {config_from_table(family, base, dims), {}};
  if (!objective) objective = holdout_pretrain_objective(family, data, seed);
  auto merged = [&base](const Json& sample) {
    Json t = base;
    for (auto it = sample.begin(); it != sample.end(); ++it) t[it.key()] = it.value();
    return t;
  };
  TuningResult result = bayes_optimize([&](const Json& sample) { return objective(merged(sample)); }, searched, budget, seed);
  return {config_from_table(family, merged(result.best), dims), std::move(result.records)};
}

}  // namespace units
