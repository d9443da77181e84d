#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ptta/common.hpp"

namespace ptta {

/// Shannon entropy in nats, 0 log 0 := 0. Rejects negative entries and
/// vectors more than 1e-6 off the simplex.
double uncertainty(std::span<const double> probs);
double uncertainty(const Vector& probs);

/// lambda_t * sigmoid(age / capacity) + lambda_u * uncertainty / log(num_classes).
double heuristic_score(double age, double uncertainty, int capacity, int num_classes,
                       double lambda_t, double lambda_u);

struct BankEntry {
  Vector x;
  int pseudo_label = 0;
  std::int64_t age = 0;
  double uncertainty = 0.0;
  std::uint64_t sequence = 0;  // admission order, unique per bank
};

enum class AdmitDecision { Inserted, Replaced, Discarded };

struct AdmitOutcome {
  AdmitDecision decision = AdmitDecision::Discarded;
  int pseudo_label = 0;
  double score = 0.0;
  int evicted_label = -1;
};

/// Category-balanced memory bank with timeliness and uncertainty scoring.
///
/// Each class owns an equal share of the capacity. A sample whose predicted
/// class is under its share is inserted while the bank has room, or else it
/// competes against the worst-scored entry of the most occupied class(es).
/// A sample whose class is at its share competes within its own class. The
/// newcomer replaces the competitor only with a strictly lower score. Every
/// admission ages all stored entries by one.
///
/// Scores are recomputed from current (age, uncertainty) at each comparison.
/// Competitor ties go to the larger age, then the smaller class index, then
/// the earlier admission.
class MemoryBank {
 public:
  MemoryBank(int capacity, int num_classes, double lambda_t = 1.0, double lambda_u = 1.0);

  AdmitOutcome admit(const Vector& x, std::span<const double> teacher_probs);

  /// Entries in admission order.
  const std::vector<BankEntry>& snapshot() const { return entries_; }

  int capacity() const { return capacity_; }
  int num_classes() const { return num_classes_; }
  double lambda_t() const { return lambda_t_; }
  double lambda_u() const { return lambda_u_; }
  int size() const { return static_cast<int>(entries_.size()); }
  bool empty() const { return entries_.empty(); }
  const std::vector<int>& occupancy() const { return occupancy_; }
  /// ceil(capacity / num_classes)
  int class_cap() const;

  double score(const BankEntry& entry) const;
  double mean_age() const;
  double mean_uncertainty() const;

  Matrix features() const;
  std::vector<double> ages() const;

  nlohmann::json to_json() const;
  static MemoryBank from_json(const nlohmann::json& j);

 private:
  int capacity_;
  int num_classes_;
  double lambda_t_;
  double lambda_u_;
  std::vector<BankEntry> entries_;
  std::vector<int> occupancy_;
  std::uint64_t next_sequence_ = 0;
};

}  // namespace ptta
