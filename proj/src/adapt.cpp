#include "ptta/adapt.hpp"

#include <algorithm>
#include <cmath>

namespace ptta {

double timeliness_weight(double age, int capacity) {
  require(age >= 0.0, "timeliness_weight: negative age");
  require(capacity >= 1, "timeliness_weight: capacity must be >= 1");
  const double e = std::exp(-age / static_cast<double>(capacity));
  return e / (1.0 + e);
}

double consistency_loss(const Vector& teacher_probs, const Vector& student_probs,
                        bool divide_by_classes) {
  require(teacher_probs.size() == student_probs.size() && teacher_probs.size() >= 1,
          "consistency_loss: size mismatch");
  double sum = 0.0;
  for (Eigen::Index c = 0; c < teacher_probs.size(); ++c)
    sum += teacher_probs[c] * std::log(std::max(student_probs[c], kLogClamp));
  const double scale = divide_by_classes ? 1.0 / static_cast<double>(teacher_probs.size()) : 1.0;
  return -scale * sum;
}

nn::LossResult weighted_consistency(const Matrix& teacher_probs, const Matrix& student_logits,
                                    std::span<const double> weights, bool divide_by_classes) {
  require(teacher_probs.rows() == student_logits.rows() && teacher_probs.cols() == student_logits.cols(),
          "weighted_consistency: shape mismatch");
  require(static_cast<Eigen::Index>(weights.size()) == student_logits.rows(),
          "weighted_consistency: weight count mismatch");
  const auto n = student_logits.rows();
  const auto classes = student_logits.cols();
  const double scale = divide_by_classes ? 1.0 / static_cast<double>(classes) : 1.0;
  const Matrix p_s = nn::softmax(student_logits);
  nn::LossResult out;
  out.grad_logits = Matrix::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weights[static_cast<std::size_t>(i)];
    double row = 0.0;
    double active_mass = 0.0;
    for (Eigen::Index c = 0; c < classes; ++c) {
      const double ps = p_s(i, c);
      if (ps > kLogClamp) {
        row += teacher_probs(i, c) * std::log(ps);
        active_mass += teacher_probs(i, c);
        out.grad_logits(i, c) -= teacher_probs(i, c);
      } else {
        row += teacher_probs(i, c) * std::log(kLogClamp);
      }
    }
    out.grad_logits.row(i) += active_mass * p_s.row(i);
    out.grad_logits.row(i) *= w * scale / static_cast<double>(n);
    out.value += -scale * w * row;
  }
  out.value /= static_cast<double>(n);
  return out;
}

Matrix StrongAugment::apply(const Matrix& x, Rng& rng) const {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution drop(dropout);
  std::uniform_real_distribution<double> jitter(scale_min, scale_max);
  Matrix out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double scale = jitter(rng);
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      double v = (out(r, c) + noise_stddev * noise(rng)) * scale;
      if (drop(rng)) v = 0.0;
      out(r, c) = v;
    }
  }
  return out;
}

RobustLossResult robust_loss(const Matrix& weak_views, const Matrix& strong_views,
                             std::span<const double> ages, int capacity,
                             const nn::DenseNet& teacher, const nn::DenseNet& student,
                             const nn::StatsSource& teacher_source,
                             const nn::StatsSource& student_source, bool divide_by_classes) {
  require(weak_views.rows() >= 1, "robust_loss: empty bank");
  require(weak_views.rows() == strong_views.rows() &&
              static_cast<Eigen::Index>(ages.size()) == weak_views.rows(),
          "robust_loss: view/age count mismatch");
  RobustLossResult out;
  out.teacher_probs = nn::softmax(nn::forward(teacher, weak_views, teacher_source).logits);
  out.student = nn::forward(student, strong_views, student_source);
  std::vector<double> weights;
  weights.reserve(ages.size());
  for (double a : ages) weights.push_back(timeliness_weight(a, capacity));
  auto loss = weighted_consistency(out.teacher_probs, out.student.logits, weights, divide_by_classes);
  out.value = loss.value;
  out.grad_logits = std::move(loss.grad_logits);
  return out;
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::Source: return "source";
    case Method::Bn: return "bn";
    case Method::Pl: return "pl";
    case Method::Tent: return "tent";
    case Method::Rotta: return "rotta";
    case Method::RottaNoRbn: return "rotta_no_rbn";
    case Method::RottaNoCstu: return "rotta_no_cstu";
    case Method::RottaNoRt: return "rotta_no_rt";
  }
  throw Error("unknown method");
}

Method parse_method(std::string_view name) {
  for (auto m : {Method::Source, Method::Bn, Method::Pl, Method::Tent, Method::Rotta,
                 Method::RottaNoRbn, Method::RottaNoCstu, Method::RottaNoRt}) {
    if (to_string(m) == name) return m;
  }
  throw Error("unknown method '" + std::string(name) + "'");
}

bool is_rotta_family(Method method) {
  return method == Method::Rotta || method == Method::RottaNoRbn ||
         method == Method::RottaNoCstu || method == Method::RottaNoRt;
}

StepResult SourceAdapter::step(const Matrix& x) {
  StepResult r;
  r.predictions = nn::argmax_rows(nn::forward(net_, x, nn::StatsSource::train_running()).logits);
  return r;
}

BatchStatsAdapter::BatchStatsAdapter(Method method, nn::DenseNet net, const AdaptConfig& config)
    : method_(method), net_(std::move(net)) {
  require(method == Method::Bn || method == Method::Pl || method == Method::Tent,
          "BatchStatsAdapter: unsupported method");
  adam_ = nn::make_adam(net_, nn::ParamGroup::Affine, nn::AdamConfig{config.lr});
}

StepResult BatchStatsAdapter::step(const Matrix& x) {
  StepResult r;
  auto fwd = nn::forward(net_, x, nn::StatsSource::test_batch());
  r.predictions = nn::argmax_rows(fwd.logits);
  if (method_ == Method::Bn) return r;
  const auto loss = method_ == Method::Pl ? nn::cross_entropy(fwd.logits, r.predictions)
                                          : nn::mean_entropy(fwd.logits);
  if (!std::isfinite(loss.value))
    throw DivergenceError(std::string(to_string(method_)) + ": loss became non-finite");
  nn::adam_step(adam_, net_, nn::backward(net_, fwd.tape, loss.grad_logits, nn::ParamGroup::Affine));
  r.loss = loss.value;
  r.updates = 1;
  return r;
}

RottaOptions RottaOptions::for_method(Method method) {
  switch (method) {
    case Method::Rotta: return {true, true, true};
    case Method::RottaNoRbn: return {false, true, true};
    case Method::RottaNoCstu: return {true, false, true};
    case Method::RottaNoRt: return {true, true, false};
    default: throw Error("not a RoTTA variant: " + std::string(to_string(method)));
  }
}

RottaAdapter::RottaAdapter(const nn::DenseNet& pretrained, const AdaptConfig& config,
                           RottaOptions options, Method method)
    : method_(method),
      config_(config),
      options_(options),
      source_(pretrained),
      student_(pretrained),
      teacher_(pretrained),
      rbn_(RbnState::init_from_pretrained(pretrained, config.alpha)),
      bank_(config.capacity, pretrained.output_dim(), config.lambda_t, config.lambda_u),
      adam_(nn::make_adam(pretrained, nn::ParamGroup::Affine, nn::AdamConfig{config.lr})),
      rng_(mix_seed(config.seed, 0xa06)) {
  require(config.nu >= 0.0 && config.nu <= 1.0, "rotta: nu must lie in [0, 1]");
  require(config.samples_per_update >= 0, "rotta: samples_per_update must be >= 0");
}

void RottaAdapter::update_teacher() {
  const double nu = config_.nu;
  const auto student = student_.parameter_values(nn::ParamGroup::Affine);
  auto teacher = teacher_.parameters(nn::ParamGroup::Affine);
  for (std::size_t i = 0; i < teacher.size(); ++i)
    for (std::size_t j = 0; j < teacher[i].values.size(); ++j)
      teacher[i].values[j] = (1.0 - nu) * teacher[i].values[j] + nu * student[i][j];
}

double RottaAdapter::optimize(const Matrix& train_x, std::span<const double> ages) {
  const auto stats = [&](bool update) {
    return options_.use_rbn ? nn::StatsSource::rbn_global(rbn_, update) : nn::StatsSource::test_batch();
  };
  double value = 0.0;
  if (options_.robust_training) {
    const AugmentPair aug{config_.strong};
    const Matrix strong = aug.strong.apply(train_x, rng_);
    auto loss = robust_loss(aug.weak(train_x), strong, ages, config_.capacity, teacher_, student_,
                            stats(true), stats(false), config_.divide_by_classes);
    if (!std::isfinite(loss.value)) throw DivergenceError("rotta: loss became non-finite");
    nn::adam_step(adam_, student_,
                  nn::backward(student_, loss.student.tape, loss.grad_logits, nn::ParamGroup::Affine));
    update_teacher();
    value = loss.value;
  } else {
    if (options_.use_rbn) nn::forward(student_, train_x, stats(true));
    auto fwd = nn::forward(student_, train_x, stats(false));
    const auto loss = nn::mean_entropy(fwd.logits);
    if (!std::isfinite(loss.value)) throw DivergenceError("rotta_no_rt: loss became non-finite");
    nn::adam_step(adam_, student_, nn::backward(student_, fwd.tape, loss.grad_logits, nn::ParamGroup::Affine));
    value = loss.value;
  }
  return value;
}

StepResult RottaAdapter::step(const Matrix& x) {
  StepResult r;
  const auto& model = predictor();
  const auto source = options_.use_rbn ? nn::StatsSource::rbn_global(rbn_, false)
                                       : nn::StatsSource::test_batch();
  const Matrix probs = nn::softmax(nn::forward(model, x, source).logits);
  r.predictions = nn::argmax_rows(probs);

  if (options_.use_cstu) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Vector p = probs.row(i).transpose();
      bank_.admit(x.row(i).transpose(), std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
    }
  }

  int updates = 1;
  if (config_.samples_per_update > 0) {
    pending_samples_ += x.rows();
    updates = static_cast<int>(pending_samples_ / config_.samples_per_update);
    pending_samples_ -= static_cast<std::int64_t>(updates) * config_.samples_per_update;
  }

  for (int u = 0; u < updates; ++u) {
    double loss = 0.0;
    if (options_.use_cstu) {
      if (bank_.empty()) break;
      const auto ages = bank_.ages();
      loss = optimize(bank_.features(), ages);
    } else {
      const std::vector<double> ages(static_cast<std::size_t>(x.rows()), 0.0);
      loss = optimize(x, ages);
    }
    r.loss = loss;
    ++r.updates;
  }
  return r;
}

AdapterProbe RottaAdapter::probe() const {
  AdapterProbe p;
  p.bank_size = bank_.size();
  p.occupancy = bank_.occupancy();
  p.mean_age = bank_.mean_age();
  p.mean_uncertainty = bank_.mean_uncertainty();
  p.rbn_drift = rbn_.drift_norm(source_);
  return p;
}

std::unique_ptr<Adapter> make_adapter(Method method, const nn::DenseNet& pretrained,
                                      const AdaptConfig& config) {
  switch (method) {
    case Method::Source:
      return std::make_unique<SourceAdapter>(pretrained);
    case Method::Bn:
    case Method::Pl:
    case Method::Tent:
      return std::make_unique<BatchStatsAdapter>(method, pretrained, config);
    case Method::Rotta:
    case Method::RottaNoRbn:
    case Method::RottaNoCstu:
    case Method::RottaNoRt:
      return std::make_unique<RottaAdapter>(pretrained, config, RottaOptions::for_method(method), method);
  }
  throw Error("make_adapter: unknown method");
}

}  // namespace ptta
