#pragma once

// Fusion algorithms as a mergeable partial-aggregate algebra. The same
// accumulate/merge/finalize triple drives the sequential fold, the
// data-parallel local engine and the distributed map/reduce engine.
//
//   FedAvg:  acc = sum n_i * w_i,  count_sum = sum n_i,
//            result = acc / (count_sum + epsilon)
//   IterAvg: acc = sum w_i,        count_sum = update_count,
//            result = acc / update_count
//
// Accumulators are always f64. With Summation::Compensated every add goes
// through an error-free TwoSum (and FMA-based TwoProduct for the n_i * w_i
// term) and the rounding errors are carried in a parallel array.

#include <cstdint>
#include <optional>
#include <vector>

#include "fedagg/tensor_model.hpp"

namespace fedagg {

enum class FusionAlgo : std::uint8_t { FedAvg = 0, IterAvg = 1 };
enum class Summation : std::uint8_t { Naive = 0, Compensated = 1 };

std::string_view to_string(FusionAlgo a);
FusionAlgo parse_fusion_algo(std::string_view s);
std::string_view to_string(Summation s);
Summation parse_summation(std::string_view s);

struct FusionConfig {
  FusionAlgo algo = FusionAlgo::FedAvg;
  double epsilon = 1e-6;
  Summation summation = Summation::Naive;
  std::optional<Dtype> output_dtype;  // defaults to the input schema dtype

  void validate() const;
  friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

class PartialAggregate {
 public:
  // Identity element: zero accumulators, zero counts.
  PartialAggregate(ModelSchema schema, FusionAlgo algo, Summation summation);

  const ModelSchema& schema() const { return schema_; }
  FusionAlgo algo() const { return algo_; }
  Summation summation() const { return summation_; }
  const std::vector<std::vector<double>>& acc() const { return acc_; }
  const std::vector<std::vector<double>>& compensation() const { return comp_; }
  std::uint64_t count_sum() const { return count_sum_; }
  std::uint64_t update_count() const { return update_count_; }

  // In-place forms used by the engines; the free functions below are the
  // value-semantic API. Both leave *this untouched when they throw.
  void accumulate(const ModelUpdate& u);
  void merge(const PartialAggregate& other);

  std::uint64_t accumulator_bytes() const;

  friend bool operator==(const PartialAggregate&, const PartialAggregate&) = default;

 private:
  friend PartialAggregate decode_partial(ByteView);

  ModelSchema schema_;
  FusionAlgo algo_;
  Summation summation_;
  std::vector<std::vector<double>> acc_;
  std::vector<std::vector<double>> comp_;  // empty unless Compensated
  std::uint64_t count_sum_ = 0;
  std::uint64_t update_count_ = 0;
};

PartialAggregate partial_new(const ModelSchema& schema, const FusionConfig& cfg);
PartialAggregate partial_accumulate(const PartialAggregate& p, const ModelUpdate& u,
                                    const FusionConfig& cfg);
PartialAggregate partial_merge(const PartialAggregate& a, const PartialAggregate& b);
GlobalModel finalize(const PartialAggregate& p, const FusionConfig& cfg,
                     std::uint64_t round = 0);

// Fold in the given order with a single finalize.
GlobalModel fuse_sequential(const std::vector<ModelUpdate>& updates, const FusionConfig& cfg,
                            std::uint64_t round = 0);

inline constexpr std::string_view kPartialMagic = "FPAG";
inline constexpr std::uint16_t kPartialVersion = 1;

Bytes encode_partial(const PartialAggregate& p);
PartialAggregate decode_partial(ByteView bytes);

// Largest elementwise |a - b| / max(|a|, |b|) over all layers (0 where
// a == b). Throws SchemaMismatch when the layer layouts differ.
double max_relative_difference(const std::vector<LayerTensor>& a,
                               const std::vector<LayerTensor>& b);

}  // namespace fedagg
