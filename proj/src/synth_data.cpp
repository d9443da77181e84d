#include "ptta/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

namespace ptta {

namespace {

constexpr std::string_view kDatasetMagic = "ptta-dataset";

Vector gaussian_vector(Rng& rng, int dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace

std::string_view to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::Identity: return "identity";
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::FeatureShift: return "feature_shift";
    case CorruptionKind::Rotation2dPairs: return "rotation_2d_pairs";
    case CorruptionKind::FeatureScale: return "feature_scale";
    case CorruptionKind::OcclusionMask: return "occlusion_mask";
  }
  throw Error("unknown corruption kind");
}

CorruptionKind parse_corruption_kind(std::string_view name) {
  for (auto kind : {CorruptionKind::Identity, CorruptionKind::GaussianNoise,
                    CorruptionKind::FeatureShift, CorruptionKind::Rotation2dPairs,
                    CorruptionKind::FeatureScale, CorruptionKind::OcclusionMask}) {
    if (to_string(kind) == name) return kind;
  }
  throw Error("unknown corruption kind '" + std::string(name) + "'");
}

TaskSpec make_task(int num_classes, int feature_dim, double within_class_stddev,
                   std::uint64_t seed) {
  TaskSpec spec;
  spec.num_classes = num_classes;
  spec.feature_dim = feature_dim;
  spec.within_class_stddev = within_class_stddev;
  spec.seed = seed;
  Rng rng(mix_seed(seed, 0x7a5c));
  for (int c = 0; c < num_classes; ++c) spec.class_centers.push_back(gaussian_vector(rng, feature_dim));
  validate(spec);
  return spec;
}

TaskSpec default_task(std::uint64_t seed) { return make_task(10, 16, 0.7, seed); }

void validate(const TaskSpec& spec) {
  require(spec.num_classes >= 1, "task: num_classes must be positive");
  require(spec.feature_dim >= 1, "task: feature_dim must be positive");
  require(std::isfinite(spec.within_class_stddev) && spec.within_class_stddev > 0.0,
          "task: within_class_stddev must be positive");
  require(static_cast<int>(spec.class_centers.size()) == spec.num_classes,
          "task: expected one center per class");
  for (const auto& center : spec.class_centers) {
    require(center.size() == spec.feature_dim, "task: center dimension mismatch");
    require(center.allFinite(), "task: class centers must be finite");
  }
  for (std::size_t a = 0; a < spec.class_centers.size(); ++a)
    for (std::size_t b = a + 1; b < spec.class_centers.size(); ++b)
      require(spec.class_centers[a] != spec.class_centers[b], "task: class centers must be distinct");
}

std::vector<LabeledExample> generate_examples(const TaskSpec& spec, int n_per_class,
                                              std::uint64_t stream) {
  validate(spec);
  require(n_per_class >= 1, "generate_examples: n_per_class must be >= 1");
  Rng rng(mix_seed(spec.seed, 0x1000 + stream));
  std::vector<LabeledExample> out;
  out.reserve(static_cast<std::size_t>(spec.num_classes) * n_per_class);
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      Vector noise = gaussian_vector(rng, spec.feature_dim);
      out.push_back({spec.class_centers[c] + spec.within_class_stddev * noise, c});
    }
  }
  return out;
}

std::vector<LabeledExample> generate_balanced(const TaskSpec& spec, int total,
                                              std::uint64_t stream) {
  validate(spec);
  require(total >= spec.num_classes, "generate_balanced: need at least one example per class");
  Rng rng(mix_seed(spec.seed, 0x2000 + stream));
  std::vector<LabeledExample> out;
  out.reserve(static_cast<std::size_t>(total));
  for (int c = 0; c < spec.num_classes; ++c) {
    const int n = total / spec.num_classes + (c < total % spec.num_classes ? 1 : 0);
    for (int i = 0; i < n; ++i) {
      Vector noise = gaussian_vector(rng, spec.feature_dim);
      out.push_back({spec.class_centers[c] + spec.within_class_stddev * noise, c});
    }
  }
  return out;
}

Corruptor::Corruptor(const CorruptionSpec& spec, const TaskSpec& task)
    : spec_(spec), dim_(task.feature_dim), unit_(task.within_class_stddev) {
  require(std::isfinite(spec.severity) && spec.severity >= 0.0 && spec.severity <= 1.0,
          "corruption: severity must lie in [0, 1]");
  Rng rng(mix_seed(spec.seed, 0xc0aa));
  switch (spec.kind) {
    case CorruptionKind::FeatureShift: {
      shift_direction_ = gaussian_vector(rng, dim_);
      shift_direction_.normalize();
      break;
    }
    case CorruptionKind::Rotation2dPairs: {
      pair_order_.resize(dim_);
      std::iota(pair_order_.begin(), pair_order_.end(), 0);
      std::shuffle(pair_order_.begin(), pair_order_.end(), rng);
      break;
    }
    case CorruptionKind::OcclusionMask: {
      occlusion_start_ = std::uniform_int_distribution<int>(0, dim_ - 1)(rng);
      break;
    }
    case CorruptionKind::Identity:
    case CorruptionKind::GaussianNoise:
    case CorruptionKind::FeatureScale:
      break;
    default:
      throw Error("corruption: unknown kind");
  }
}

double Corruptor::noise_stddev() const { return spec_.severity * kNoiseStddevPerUnit * unit_; }
double Corruptor::shift_magnitude() const {
  return spec_.severity * kShiftMagnitudePerUnit * unit_;
}
double Corruptor::scale_factor() const { return 1.0 + spec_.severity * (kMaxScaleFactor - 1.0); }
int Corruptor::occluded_width() const {
  return static_cast<int>(std::lround(spec_.severity * dim_));
}

LabeledExample Corruptor::apply(const LabeledExample& example, std::uint64_t sample_key) const {
  require(example.x.size() == dim_, "corruption: feature dimension mismatch");
  LabeledExample out = example;
  switch (spec_.kind) {
    case CorruptionKind::Identity:
      break;
    case CorruptionKind::GaussianNoise: {
      Rng rng(mix_seed(spec_.seed, sample_key));
      out.x += noise_stddev() * gaussian_vector(rng, dim_);
      break;
    }
    case CorruptionKind::FeatureShift:
      out.x += shift_magnitude() * shift_direction_;
      break;
    case CorruptionKind::Rotation2dPairs: {
      const double angle = spec_.severity * kMaxRotationDegrees * std::numbers::pi / 180.0;
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      for (int p = 0; p + 1 < dim_; p += 2) {
        const int i = pair_order_[p];
        const int j = pair_order_[p + 1];
        const double xi = example.x[i];
        const double xj = example.x[j];
        out.x[i] = c * xi - s * xj;
        out.x[j] = s * xi + c * xj;
      }
      break;
    }
    case CorruptionKind::FeatureScale:
      out.x *= scale_factor();
      break;
    case CorruptionKind::OcclusionMask: {
      // Circular block so that larger severities always cover smaller ones.
      const int width = occluded_width();
      for (int k = 0; k < width; ++k) out.x[(occlusion_start_ + k) % dim_] = 0.0;
      break;
    }
  }
  return out;
}

LabeledExample apply_corruption(const LabeledExample& example, const CorruptionSpec& spec,
                                const TaskSpec& task, std::uint64_t sample_key) {
  return Corruptor(spec, task).apply(example, sample_key);
}

void write_dataset(std::ostream& out, const std::vector<LabeledExample>& data, int num_classes,
                   int feature_dim) {
  out << kDatasetMagic << " classes=" << num_classes << " dim=" << feature_dim << '\n';
  out << std::setprecision(17);
  for (const auto& ex : data) {
    require(ex.x.size() == feature_dim, "write_dataset: feature dimension mismatch");
    out << ex.y << '\t';
    for (int i = 0; i < feature_dim; ++i) {
      if (i) out << ',';
      out << ex.x[i];
    }
    out << '\n';
  }
}

Dataset read_dataset(std::istream& in) {
  Dataset ds;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "read_dataset: missing header");
  {
    std::istringstream header(line);
    std::string magic, classes, dim;
    header >> magic >> classes >> dim;
    require(magic == kDatasetMagic, "read_dataset: bad magic '" + magic + "'");
    require(classes.rfind("classes=", 0) == 0 && dim.rfind("dim=", 0) == 0,
            "read_dataset: malformed header");
    ds.num_classes = std::stoi(classes.substr(8));
    ds.feature_dim = std::stoi(dim.substr(4));
    require(ds.num_classes > 0 && ds.feature_dim > 0, "read_dataset: bad header values");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    require(tab != std::string::npos, "read_dataset: line " + std::to_string(line_no) + " lacks a tab");
    LabeledExample ex;
    ex.y = std::stoi(line.substr(0, tab));
    require(ex.y >= 0 && ex.y < ds.num_classes,
            "read_dataset: label out of range on line " + std::to_string(line_no));
    ex.x.resize(ds.feature_dim);
    std::istringstream fields(line.substr(tab + 1));
    std::string field;
    int i = 0;
    while (std::getline(fields, field, ',')) {
      require(i < ds.feature_dim, "read_dataset: too many features on line " + std::to_string(line_no));
      ex.x[i++] = std::stod(field);
    }
    require(i == ds.feature_dim, "read_dataset: too few features on line " + std::to_string(line_no));
    require(ex.x.allFinite(), "read_dataset: non-finite feature on line " + std::to_string(line_no));
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace ptta
