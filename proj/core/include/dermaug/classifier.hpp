#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dermaug/corpus.hpp"
#include "dermaug/hashing.hpp"
#include "dermaug/image_io.hpp"

namespace dermaug {

struct ClassifierConfig {
  std::string backbone = "toy-cnn";  // toy-cnn | toy-vit
  double lr = 1e-3;
  int step_size = 10;
  double gamma = 0.1;
  int epochs = 30;
  int batch_size = 32;
  std::string transform = "flip";  // flip | none
  int input_size = 32;
  bool weighted_sampler = true;
  std::string average = "macro";  // macro | weighted
  std::uint64_t seed = 0;

  void validate() const;
};
void to_json(nlohmann::json& j, const ClassifierConfig& c);
void from_json(const nlohmann::json& j, ClassifierConfig& c);

/// weight(record) = 1 / count(record's class).
std::vector<double> make_sample_weights(const std::vector<Condition>& labels);

/// Network mapping images [B, 3, s, s] to logits [B, K].
class ClassifierNet : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& images) = 0;
};

/// Builds a backbone by identifier; throws ValidationError on an unknown id.
std::shared_ptr<ClassifierNet> make_backbone(const std::string& id, std::int64_t n_classes, int input_size);

struct Classifier {
  ClassifierConfig config;
  std::vector<Condition> labels;  // output index -> condition
  std::shared_ptr<ClassifierNet> net;

  /// Predicted conditions for images [B, 3, H, W] in [0, 1].
  std::vector<Condition> predict(const torch::Tensor& images) const;
  NamedTensors state() const;
};

struct ClassifierTrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  std::size_t pool_size = 0;
};

/// Trains on the union of `pools` (e.g. real and synthetic). The label space is
/// the set of conditions in the pools. Deterministic in config.seed.
Classifier train_classifier(const std::vector<const DatasetManifest*>& pools, const ClassifierConfig& config,
                            ImageStore& store, ClassifierTrainReport* report = nullptr);

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<Condition> labels;                 // confusion row/column order
  std::vector<std::vector<std::int64_t>> confusion;  // [truth][prediction]
  struct PerClass {
    Condition condition;
    double precision, recall, f1;
    std::int64_t support;
  };
  std::vector<PerClass> per_class;
};
void to_json(nlohmann::json& j, const MetricsReport& m);
MetricsReport metrics_from_json(const nlohmann::json& j);

/// Percentages from a K x K confusion matrix [truth][prediction]. Averages run
/// over classes that occur in the truth or the predictions; a class with no
/// predicted positives has precision 0.
MetricsReport metrics_from_confusion(const std::vector<std::vector<std::int64_t>>& confusion,
                                     const std::string& average = "macro");

MetricsReport compute_metrics(const std::vector<Condition>& truth, const std::vector<Condition>& predicted,
                              const std::string& average = "macro");

/// Throws ValidationError when the test set has a class outside the model's label space.
MetricsReport evaluate(const Classifier& model, const DatasetManifest& test, ImageStore& store);

void save_classifier(const std::filesystem::path& path, const Classifier& model);
Classifier load_classifier(const std::filesystem::path& path);

}  // namespace dermaug
