#pragma once

#include "units/pretrain.hpp"
#include "units/serialize.hpp"

#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

// Hyper-parameter configuration. Configs are flat JSON objects keyed by the
// names of the default table; see default_table().
namespace units {

struct Dimension {
  enum class Kind { real, integer, categorical };
  std::string name;
  Kind kind = Kind::real;
  double low = 0.0;
  double high = 1.0;
  bool log = false;
  std::vector<std::string> choices;

  static Dimension real(std::string name, double low, double high, bool log = false);
  static Dimension integer(std::string name, long low, long high, bool log = false);
  static Dimension categorical(std::string name, std::vector<std::string> choices);

  void validate() const;
  /// Maps a value of this dimension to [0, 1] (categoricals: index).
  double encode(const Json& value) const;
  Json decode(double u) const;
};

class SearchSpace {
 public:
  SearchSpace() = default;
  explicit SearchSpace(std::vector<Dimension> dims);

  SearchSpace& add(Dimension dim);
  const std::vector<Dimension>& dimensions() const { return dims_; }
  bool empty() const { return dims_.empty(); }
  void validate() const;

 private:
  std::vector<Dimension> dims_;
};

struct TuningRecord {
  int trial = 0;
  Json config;
  /// Finite unless failed.
  double value = 0.0;
  double wall_seconds = 0.0;
  bool failed = false;
  std::string error;
};

Json to_json(const TuningRecord& r);
void write_records_jsonl(std::ostream& out, const std::vector<TuningRecord>& records);

struct TuningResult {
  Json best;
  double best_value = 0.0;
  std::vector<TuningRecord> records;
};

/// Lower is better. Throwing or returning a non-finite value fails the trial.
using Objective = std::function<double(const Json& config)>;

/// Proposes the next config given the committed history.
class Proposer {
 public:
  virtual ~Proposer() = default;
  virtual Json propose(const SearchSpace& space, const std::vector<TuningRecord>& history, Rng& rng) = 0;
};

class RandomProposer : public Proposer {
 public:
  Json propose(const SearchSpace& space, const std::vector<TuningRecord>& history, Rng& rng) override;
};

/// Tree-structured Parzen estimator: random for the first `startup` trials,
/// then the best of `candidates` draws from the good-trial density by the
/// good/bad density ratio.
class TpeProposer : public Proposer {
 public:
  TpeProposer(int startup, double gamma = 0.25, int candidates = 24);
  Json propose(const SearchSpace& space, const std::vector<TuningRecord>& history, Rng& rng) override;

 private:
  int startup_;
  double gamma_;
  int candidates_;
};

/// Runs `budget` trials with `proposer`. Throws Error if every trial fails.
TuningResult optimize(const Objective& objective, const SearchSpace& space, int budget, std::uint64_t seed,
                      Proposer& proposer);
/// TPE with max(1, budget/4) random start-up trials.
TuningResult bayes_optimize(const Objective& objective, const SearchSpace& space, int budget, std::uint64_t seed);
TuningResult random_search(const Objective& objective, const SearchSpace& space, int budget, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Pre-training configs

enum class TuningMode { default_mode, manual, smart };

std::string to_string(TuningMode mode);
TuningMode parse_tuning_mode(const std::string& name);

/// The documented defaults of one template family as a flat table. Keys:
/// architecture, depth, hidden_width, repr_dim, kernel_size, epochs,
/// batch_size, learning_rate, temperature, masking_rate, mask_geometry,
/// hybrid_weight (null outside hybrid), augmentations, n_negatives, seed.
Json default_table(TemplateFamily family);

/// Overrides given as strings ("lr" style aliases are not accepted). Unknown
/// keys raise ParameterError listing the valid ones.
Json apply_overrides(Json table, const std::map<std::string, std::string>& overrides);

PretrainTemplateConfig config_from_table(TemplateFamily family, const Json& table, int input_dims);
Json table_from_config(const PretrainTemplateConfig& config);

SearchSpace default_search_space(TemplateFamily family);

/// Mean template objective on a 20% holdout after pre-training on the rest.
Objective holdout_pretrain_objective(TemplateFamily family, const TimeSeriesDataset& data, std::uint64_t seed);

struct ResolvedConfig {
  PretrainTemplateConfig config;
  /// Smart mode only.
  std::vector<TuningRecord> records;
};

/// default: the table verbatim; manual: the table patched by overrides;
/// smart: overrides fixed, the remaining space searched by bayes_optimize.
/// `objective` defaults to holdout_pretrain_objective on `data`.
ResolvedConfig resolve_config(TuningMode mode, TemplateFamily family, const std::map<std::string, std::string>& overrides,
                              const TimeSeriesDataset& data, const SearchSpace& space = {}, int budget = 10,
                              std::uint64_t seed = 0, Objective objective = {});

}  // namespace units
