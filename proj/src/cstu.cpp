#include "ptta/cstu.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace ptta {

double uncertainty(std::span<const double> probs) {
  require(!probs.empty(), "uncertainty: empty probability vector");
  double total = 0.0;
  double h = 0.0;
  for (double p : probs) {
    require(std::isfinite(p) && p >= 0.0, "uncertainty: probabilities must be non-negative");
    total += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  require(std::abs(total - 1.0) <= 1e-6, "uncertainty: probabilities must sum to 1");
  return h;
}

double uncertainty(const Vector& probs) {
  return uncertainty(std::span<const double>(probs.data(), static_cast<std::size_t>(probs.size())));
}

double heuristic_score(double age, double uncertainty, int capacity, int num_classes,
                       double lambda_t, double lambda_u) {
  require(capacity >= 1, "heuristic_score: capacity must be >= 1");
  require(num_classes >= 2, "heuristic_score: need at least 2 classes");
  require(age >= 0.0, "heuristic_score: negative age");
  const double log_c = std::log(static_cast<double>(num_classes));
  require(uncertainty >= 0.0 && uncertainty <= log_c + 1e-9,
          "heuristic_score: uncertainty outside [0, log C]");
  const double timeliness = 1.0 / (1.0 + std::exp(-age / static_cast<double>(capacity)));
  return lambda_t * timeliness + lambda_u * uncertainty / log_c;
}

MemoryBank::MemoryBank(int capacity, int num_classes, double lambda_t, double lambda_u)
    : capacity_(capacity),
      num_classes_(num_classes),
      lambda_t_(lambda_t),
      lambda_u_(lambda_u),
      occupancy_(static_cast<std::size_t>(std::max(num_classes, 0)), 0) {
  require(capacity >= 1, "memory bank: capacity must be >= 1");
  require(num_classes >= 2, "memory bank: need at least 2 classes");
  require(std::isfinite(lambda_t) && std::isfinite(lambda_u) && lambda_t >= 0.0 && lambda_u >= 0.0,
          "memory bank: lambdas must be finite and non-negative");
  entries_.reserve(static_cast<std::size_t>(capacity));
}

int MemoryBank::class_cap() const { return (capacity_ + num_classes_ - 1) / num_classes_; }

double MemoryBank::score(const BankEntry& entry) const {
  return heuristic_score(static_cast<double>(entry.age), entry.uncertainty, capacity_, num_classes_,
                         lambda_t_, lambda_u_);
}

AdmitOutcome MemoryBank::admit(const Vector& x, std::span<const double> teacher_probs) {
  require(static_cast<int>(teacher_probs.size()) == num_classes_,
          "memory bank: probability vector has wrong length");
  AdmitOutcome outcome;
  const double u = uncertainty(teacher_probs);
  const auto label = static_cast<int>(
      std::max_element(teacher_probs.begin(), teacher_probs.end()) - teacher_probs.begin());
  outcome.pseudo_label = label;
  outcome.score = heuristic_score(0.0, u, capacity_, num_classes_, lambda_t_, lambda_u_);

  // Candidate classes to evict from; empty means plain insertion.
  std::vector<bool> search(static_cast<std::size_t>(num_classes_), false);
  bool any = false;
  if (occupancy_[label] * num_classes_ < capacity_) {
    if (size() >= capacity_) {
      const int most = *std::max_element(occupancy_.begin(), occupancy_.end());
      for (int c = 0; c < num_classes_; ++c) search[c] = occupancy_[c] == most;
      any = true;
    }
  } else {
    search[label] = true;
    any = true;
  }

  BankEntry fresh{x, label, 0, u, next_sequence_++};
  if (!any) {
    entries_.push_back(std::move(fresh));
    ++occupancy_[label];
    outcome.decision = AdmitDecision::Inserted;
  } else {
    std::ptrdiff_t worst = -1;
    double worst_score = 0.0;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (!search[e.pseudo_label]) continue;
      const double s = score(e);
      bool better = worst < 0 || s > worst_score;
      if (!better && s == worst_score) {
        const auto& w = entries_[static_cast<std::size_t>(worst)];
        if (e.age != w.age) better = e.age > w.age;
        else if (e.pseudo_label != w.pseudo_label) better = e.pseudo_label < w.pseudo_label;
        else better = e.sequence < w.sequence;
      }
      if (better) {
        worst = static_cast<std::ptrdiff_t>(i);
        worst_score = s;
      }
    }
    if (worst >= 0 && outcome.score < worst_score) {
      outcome.evicted_label = entries_[static_cast<std::size_t>(worst)].pseudo_label;
      --occupancy_[outcome.evicted_label];
      entries_.erase(entries_.begin() + worst);
      entries_.push_back(std::move(fresh));
      ++occupancy_[label];
      outcome.decision = AdmitDecision::Replaced;
    } else {
      outcome.decision = AdmitDecision::Discarded;
    }
  }
  for (auto& e : entries_) ++e.age;
  return outcome;
}

double MemoryBank::mean_age() const {
  if (entries_.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& e : entries_) sum += static_cast<double>(e.age);
  return sum / static_cast<double>(entries_.size());
}

double MemoryBank::mean_uncertainty() const {
  if (entries_.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& e : entries_) sum += e.uncertainty;
  return sum / static_cast<double>(entries_.size());
}

Matrix MemoryBank::features() const {
  require(!entries_.empty(), "memory bank: empty");
  Matrix x(static_cast<Eigen::Index>(entries_.size()), entries_.front().x.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = entries_[i].x.transpose();
  return x;
}

std::vector<double> MemoryBank::ages() const {
  std::vector<double> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(static_cast<double>(e.age));
  return out;
}

nlohmann::json MemoryBank::to_json() const {
  nlohmann::json j;
  j["capacity"] = capacity_;
  j["num_classes"] = num_classes_;
  j["lambda_t"] = lambda_t_;
  j["lambda_u"] = lambda_u_;
  j["next_sequence"] = next_sequence_;
  auto& arr = j["entries"] = nlohmann::json::array();
  for (const auto& e : entries_) {
    arr.push_back({{"pseudo_label", e.pseudo_label},
                   {"age", e.age},
                   {"uncertainty", e.uncertainty},
                   {"sequence", e.sequence},
                   {"x", std::vector<double>(e.x.data(), e.x.data() + e.x.size())}});
  }
  return j;
}

MemoryBank MemoryBank::from_json(const nlohmann::json& j) {
  MemoryBank bank(j.at("capacity").get<int>(), j.at("num_classes").get<int>(),
                  j.at("lambda_t").get<double>(), j.at("lambda_u").get<double>());
  bank.next_sequence_ = j.at("next_sequence").get<std::uint64_t>();
  for (const auto& e : j.at("entries")) {
    const auto x = e.at("x").get<std::vector<double>>();
    BankEntry entry{Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size())),
                    e.at("pseudo_label").get<int>(), e.at("age").get<std::int64_t>(),
                    e.at("uncertainty").get<double>(), e.at("sequence").get<std::uint64_t>()};
    require(entry.pseudo_label >= 0 && entry.pseudo_label < bank.num_classes_,
            "memory bank: pseudo label out of range");
    ++bank.occupancy_[entry.pseudo_label];
    bank.entries_.push_back(std::move(entry));
  }
  require(bank.size() <= bank.capacity_, "memory bank: more entries than capacity");
  return bank;
}

}  // namespace ptta
