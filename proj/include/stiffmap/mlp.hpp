#pragma once

// 3-8-3 multilayer perceptron (ReLU hidden layer, softmax output) trained
// with Adam on categorical crossentropy.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "stiffmap/color.hpp"
#include "stiffmap/error.hpp"
#include "stiffmap/parallel.hpp"
#include "stiffmap/random.hpp"
#include "stiffmap/raster.hpp"
#include "stiffmap/segment.hpp"

namespace stiffmap {

inline constexpr int kMlpInputs = 3;
inline constexpr int kMlpHidden = 8;
inline constexpr int kMlpOutputs = kStructureClasses;

struct MlpParams {
  std::array<std::array<double, kMlpHidden>, kMlpInputs> w1{};
  std::array<double, kMlpHidden> b1{};
  std::array<std::array<double, kMlpOutputs>, kMlpHidden> w2{};
  std::array<double, kMlpOutputs> b2{};
  // Fixed input standardization, set from the training split; not trained.
  Color3 input_mean{0.0, 0.0, 0.0};
  Color3 input_scale{1.0, 1.0, 1.0};

  Color3 standardize(const Color3& x) const {
    return {(x[0] - input_mean[0]) / input_scale[0], (x[1] - input_mean[1]) / input_scale[1],
            (x[2] - input_mean[2]) / input_scale[2]};
  }

  static constexpr std::size_t size() {
    return kMlpInputs * kMlpHidden + kMlpHidden + kMlpHidden * kMlpOutputs + kMlpOutputs;
  }
  // Flat view of the trainable weights in the order w1, b1, w2, b2.
  double& operator[](std::size_t i) {
    if (i < kMlpInputs * kMlpHidden) return w1[i / kMlpHidden][i % kMlpHidden];
    i -= kMlpInputs * kMlpHidden;
    if (i < kMlpHidden) return b1[i];
    i -= kMlpHidden;
    if (i < kMlpHidden * kMlpOutputs) return w2[i / kMlpOutputs][i % kMlpOutputs];
    return b2[i - kMlpHidden * kMlpOutputs];
  }
  double operator[](std::size_t i) const { return const_cast<MlpParams&>(*this)[i]; }
};

struct TrainOptions {
  int epochs = 20;
  int batch_size = 8192;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct MlpModel {
  MlpParams params;
  TrainOptions options;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
  std::vector<double> epoch_loss;

  void validate() const {
    for (std::size_t i = 0; i < MlpParams::size(); ++i)
      require(std::isfinite(params[i]), Errc::non_finite, "model weight is not finite");
    for (int c = 0; c < kMlpInputs; ++c)
      require(std::isfinite(params.input_mean[c]) && std::isfinite(params.input_scale[c]) &&
                  params.input_scale[c] > 0.0,
              Errc::non_finite, "model input standardization is invalid");
  }
};

inline std::array<double, kMlpOutputs> mlp_forward(const MlpParams& p, const Color3& raw,
                                                   std::array<double, kMlpHidden>* hidden = nullptr) {
  const Color3 x = p.standardize(raw);
  std::array<double, kMlpHidden> h;
  for (int j = 0; j < kMlpHidden; ++j) {
    double a = p.b1[j];
    for (int i = 0; i < kMlpInputs; ++i) a += x[i] * p.w1[i][j];
    h[j] = a < 0.0 ? 0.0 : a;  // NaN propagates
  }
  std::array<double, kMlpOutputs> z;
  for (int k = 0; k < kMlpOutputs; ++k) {
    double a = p.b2[k];
    for (int j = 0; j < kMlpHidden; ++j) a += h[j] * p.w2[j][k];
    z[k] = a;
  }
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (auto& v : z) total += v = std::exp(v - m);
  for (auto& v : z) v /= total;
  if (hidden) *hidden = h;
  return z;
}

inline int argmax_class(const std::array<double, kMlpOutputs>& prob) {
  int best = 0;
  for (int k = 1; k < kMlpOutputs; ++k)
    if (prob[k] > prob[best]) best = k;
  return best;
}

// Mean crossentropy over the listed examples and its gradient.
inline double mlp_loss_and_gradient(const MlpParams& p, const TrainingSet& data,
                                    std::span<const std::size_t> idx, MlpParams& grad) {
  grad = MlpParams{};
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(idx.size());
  for (std::size_t n : idx) {
    const Color3 x = p.standardize(data.inputs[n]);
    const int y = data.labels[n];
    std::array<double, kMlpHidden> h;
    const auto prob = mlp_forward(p, data.inputs[n], &h);
    loss -= std::log(std::max(prob[y], 1e-300));
    std::array<double, kMlpOutputs> dz;
    for (int k = 0; k < kMlpOutputs; ++k) dz[k] = (prob[k] - (k == y ? 1.0 : 0.0)) * inv;
    for (int k = 0; k < kMlpOutputs; ++k) {
      grad.b2[k] += dz[k];
      for (int j = 0; j < kMlpHidden; ++j) grad.w2[j][k] += h[j] * dz[k];
    }
    for (int j = 0; j < kMlpHidden; ++j) {
      if (h[j] <= 0.0) continue;
      double dh = 0.0;
      for (int k = 0; k < kMlpOutputs; ++k) dh += p.w2[j][k] * dz[k];
      grad.b1[j] += dh;
      for (int i = 0; i < kMlpInputs; ++i) grad.w1[i][j] += x[i] * dh;
    }
  }
  return loss * inv;
}

// Glorot-uniform weights, zero biases.
inline MlpParams mlp_init(Rng& rng) {
  MlpParams p;
  const double l1 = std::sqrt(6.0 / (kMlpInputs + kMlpHidden));
  const double l2 = std::sqrt(6.0 / (kMlpHidden + kMlpOutputs));
  for (auto& row : p.w1)
    for (auto& w : row) w = rng.uniform(-l1, l1);
  for (auto& row : p.w2)
    for (auto& w : row) w = rng.uniform(-l2, l2);
  return p;
}

inline double mlp_accuracy(const MlpParams& p, const TrainingSet& data, std::span<const std::size_t> idx) {
  if (idx.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t n : idx) ok += argmax_class(mlp_forward(p, data.inputs[n])) == data.labels[n];
  return static_cast<double>(ok) / static_cast<double>(idx.size());
}

inline MlpModel train_classifier(const TrainingSet& data, const TrainOptions& opt = {}) {
  require(opt.epochs >= 1 && opt.batch_size >= 1 && opt.learning_rate > 0.0, Errc::invalid_argument,
          "training needs epochs, batch size and learning rate > 0");
  require(opt.validation_fraction >= 0.0 && opt.validation_fraction < 1.0, Errc::invalid_argument,
          "validation fraction must lie in [0, 1)");
  require(data.inputs.size() == data.labels.size(), Errc::invalid_argument, "training set is ragged");
  std::array<std::size_t, kMlpOutputs> counts{};
  for (auto y : data.labels) {
    require(y < kMlpOutputs, Errc::invalid_argument, "training label outside {0,1,2}");
    ++counts[y];
  }
  for (int k = 0; k < kMlpOutputs; ++k)
    require(counts[k] > 0, Errc::missing_class,
            std::string("no training examples of class ") + structure_name(k));

  Rng rng(opt.seed);
  MlpModel model;
  model.options = opt;
  model.params = mlp_init(rng);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(std::floor(opt.validation_fraction * data.size()));
  std::vector<std::size_t> val(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train(order.begin() + n_val, order.end());
  require(!train.empty(), Errc::insufficient_samples, "training split is empty");

  // Per-feature z-score from the training split; a constant feature keeps scale 1.
  Color3 sum{0, 0, 0}, sq{0, 0, 0};
  for (std::size_t n : train)
    for (int c = 0; c < kMlpInputs; ++c) sum[c] += data.inputs[n][c];
  for (int c = 0; c < kMlpInputs; ++c) model.params.input_mean[c] = sum[c] / static_cast<double>(train.size());
  for (std::size_t n : train)
    for (int c = 0; c < kMlpInputs; ++c) {
      const double d = data.inputs[n][c] - model.params.input_mean[c];
      sq[c] += d * d;
    }
  for (int c = 0; c < kMlpInputs; ++c) {
    const double sd = std::sqrt(sq[c] / static_cast<double>(train.size()));
    model.params.input_scale[c] = std::isfinite(sd) && sd > 1e-12 ? sd : 1.0;
    if (!std::isfinite(model.params.input_mean[c])) model.params.input_mean[c] = 0.0;
  }

  MlpParams m{}, v{}, g;
  long step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(train);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train.size(); start += opt.batch_size, ++batches) {
      const std::size_t len = std::min<std::size_t>(opt.batch_size, train.size() - start);
      const double loss = mlp_loss_and_gradient(model.params, data, {train.data() + start, len}, g);
      if (!std::isfinite(loss))
        throw Error(Errc::non_finite, "loss is not finite at epoch " + std::to_string(epoch) +
                                          " batch " + std::to_string(batches), "train");
      epoch_loss += loss;
      ++step;
      const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < MlpParams::size(); ++i) {
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
        model.params[i] -= opt.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.epsilon);
      }
    }
    model.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
  }
  model.train_accuracy = mlp_accuracy(model.params, data, train);
  model.validation_accuracy = mlp_accuracy(model.params, data, val);
  model.validate();
  return model;
}

// Per-pixel class from an RGB image; ties go to the lowest class index.
inline LabelMap predict_structure(const Raster& rgb, const MlpModel& model) {
  require_channels(rgb, 3, "predict_structure");
  LabelMap out(rgb.width, rgb.height);
  parallel_for(0, static_cast<std::ptrdiff_t>(rgb.pixel_count()), [&](std::ptrdiff_t i) {
    const auto hsv = rgb_to_hsv(pixel(rgb, static_cast<std::size_t>(i)));
    out.values[i] = static_cast<std::uint8_t>(argmax_class(mlp_forward(model.params, hsv)));
  });
  return out;
}

// ---------------------------------------------------------------------------
// JSON model files.

inline nlohmann::json to_json(const MlpModel& m) {
  nlohmann::json j;
  j["format"] = "stiffmap-mlp";
  j["layers"] = {kMlpInputs, kMlpHidden, kMlpOutputs};
  j["w1"] = m.params.w1;
  j["b1"] = m.params.b1;
  j["w2"] = m.params.w2;
  j["b2"] = m.params.b2;
  j["input_mean"] = m.params.input_mean;
  j["input_scale"] = m.params.input_scale;
  j["training"] = {{"epochs", m.options.epochs},
                   {"batch_size", m.options.batch_size},
                   {"learning_rate", m.options.learning_rate},
                   {"beta1", m.options.beta1},
                   {"beta2", m.options.beta2},
                   {"epsilon", m.options.epsilon},
                   {"validation_fraction", m.options.validation_fraction},
                   {"seed", m.options.seed},
                   {"train_accuracy", m.train_accuracy},
                   {"validation_accuracy", m.validation_accuracy},
                   {"epoch_loss", m.epoch_loss}};
  return j;
}

inline MlpModel mlp_from_json(const nlohmann::json& j) {
  try {
    require(j.at("format") == "stiffmap-mlp", Errc::malformed, "not a stiffmap MLP model");
    MlpModel m;
    j.at("w1").get_to(m.params.w1);
    j.at("b1").get_to(m.params.b1);
    j.at("w2").get_to(m.params.w2);
    j.at("b2").get_to(m.params.b2);
    j.at("input_mean").get_to(m.params.input_mean);
    j.at("input_scale").get_to(m.params.input_scale);
    const auto& t = j.at("training");
    m.options.epochs = t.at("epochs");
    m.options.batch_size = t.at("batch_size");
    m.options.learning_rate = t.at("learning_rate");
    m.options.beta1 = t.at("beta1");
    m.options.beta2 = t.at("beta2");
    m.options.epsilon = t.at("epsilon");
    m.options.validation_fraction = t.at("validation_fraction");
    m.options.seed = t.at("seed");
    m.train_accuracy = t.at("train_accuracy");
    m.validation_accuracy = t.at("validation_accuracy");
    t.at("epoch_loss").get_to(m.epoch_loss);
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::malformed, std::string("model JSON: ") + e.what());
  }
}

inline nlohmann::json to_json(const ClusterModel& m) {
  return {{"format", "stiffmap-kmeans"}, {"k", m.k},           {"centroids", m.centroids},
          {"inertia", m.inertia},        {"iterations", m.iterations},
          {"best_replicate", m.best_replicate}, {"replicate_inertias", m.replicate_inertias},
          {"inertia_history", m.inertia_history}};
}

inline ClusterModel cluster_model_from_json(const nlohmann::json& j) {
  try {
    require(j.at("format") == "stiffmap-kmeans", Errc::malformed, "not a stiffmap k-means model");
    ClusterModel m;
    m.k = j.at("k");
    j.at("centroids").get_to(m.centroids);
    m.inertia = j.at("inertia");
    m.iterations = j.at("iterations");
    m.best_replicate = j.at("best_replicate");
    j.at("replicate_inertias").get_to(m.replicate_inertias);
    j.at("inertia_history").get_to(m.inertia_history);
    require(static_cast<int>(m.centroids.size()) == m.k && m.k >= 1, Errc::malformed,
            "centroid count does not match k");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::malformed, std::string("cluster model JSON: ") + e.what());
  }
}

inline nlohmann::json to_json(const ClusterAssignment& a) {
  return {{"format", "stiffmap-assignment"}, {"class_of", a.class_of}};
}

// Accepts either {"class_of": [..]} or a map of cluster index -> class name.
inline ClusterAssignment assignment_from_json(const nlohmann::json& j, int k) {
  ClusterAssignment a;
  try {
    if (j.contains("class_of")) {
      j.at("class_of").get_to(a.class_of);
    } else {
      a.class_of.assign(k, -1);
      for (const auto& [key, val] : j.items()) {
        int idx = -1;
        try {
          idx = std::stoi(key);
        } catch (const std::exception&) {
          throw Error(Errc::malformed, "assignment key '" + key + "' is not a cluster index");
        }
        require(idx >= 0 && idx < k, Errc::malformed, "assignment index out of range");
        int cls = -1;
        if (val.is_number_integer()) cls = val.get<int>();
        else
          for (int c = 0; c < kStructureClasses; ++c)
            if (val == structure_name(c)) cls = c;
        require(cls >= 0, Errc::malformed, "unknown class for cluster " + key);
        a.class_of[idx] = cls;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::malformed, std::string("assignment JSON: ") + e.what());
  }
  for (int c : a.class_of) require(c >= 0, Errc::malformed, "assignment is missing a cluster");
  a.validate(k);
  return a;
}

}  // namespace stiffmap
