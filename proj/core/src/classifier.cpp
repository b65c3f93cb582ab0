#include "dermaug/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "dermaug/diffusion_loss.hpp"
#include "dermaug/error.hpp"
#include "dermaug/tensor_archive.hpp"

namespace dermaug {

namespace nn = torch::nn;

namespace {

constexpr const char* kClassifierKind = "classifier";
constexpr int kClassifierVersion = 1;

class ToyCnn final : public ClassifierNet {
 public:
  explicit ToyCnn(std::int64_t n_classes) {
    body_ = register_module("body", nn::Sequential());
    auto block = [this](std::int64_t in, std::int64_t out) {
      body_->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1).bias(false)));
      body_->push_back(nn::BatchNorm2d(out));
      body_->push_back(nn::ReLU());
    };
    block(3, 16);
    body_->push_back(nn::MaxPool2d(2));
    block(16, 32);
    body_->push_back(nn::MaxPool2d(2));
    block(32, 64);
    body_->push_back(nn::MaxPool2d(2));
    block(64, 64);
    head_ = register_module("head", nn::Linear(64, n_classes));
  }

  torch::Tensor forward(const torch::Tensor& images) override {
    auto h = body_->forward(images * 2.0 - 1.0);
    return head_->forward(h.mean({2, 3}));
  }

 private:
  nn::Sequential body_{nullptr};
  nn::Linear head_{nullptr};
};

class ToyVit final : public ClassifierNet {
 public:
  ToyVit(std::int64_t n_classes, int input_size, std::int64_t dim = 48, std::int64_t patch = 4) {
    if (input_size % patch != 0) throw ValidationError("toy-vit: input_size must be a multiple of 4");
    const auto tokens = (input_size / patch) * (input_size / patch);
    patch_ = register_module("patch", nn::Conv2d(nn::Conv2dOptions(3, dim, patch).stride(patch)));
    cls_ = register_parameter("cls", torch::zeros({1, 1, dim}));
    pos_ = register_parameter("pos", torch::randn({1, tokens + 1, dim}) * 0.02);
    auto layer = nn::TransformerEncoderLayerOptions(dim, 4).dim_feedforward(2 * dim).dropout(0.0);
    encoder_ = register_module("encoder", nn::TransformerEncoder(nn::TransformerEncoderOptions(layer, 2)));
    norm_ = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({dim})));
    head_ = register_module("head", nn::Linear(dim, n_classes));
  }

  torch::Tensor forward(const torch::Tensor& images) override {
    auto h = patch_->forward(images * 2.0 - 1.0).flatten(2).transpose(1, 2);  // [B, N, d]
    h = torch::cat({cls_.expand({h.size(0), 1, h.size(2)}), h}, 1) + pos_;
    h = encoder_->forward(h.transpose(0, 1)).transpose(0, 1);
    return head_->forward(norm_->forward(h.select(1, 0)));
  }

 private:
  nn::Conv2d patch_{nullptr};
  torch::Tensor cls_, pos_;
  nn::TransformerEncoder encoder_{nullptr};
  nn::LayerNorm norm_{nullptr};
  nn::Linear head_{nullptr};
};

double percent(double num, double den) { return den > 0 ? 100.0 * num / den : 0.0; }

}  // namespace

void ClassifierConfig::validate() const {
  if (lr < 0) throw ValidationError("classifier: lr must be >= 0");
  if (epochs < 1) throw ValidationError("classifier: epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("classifier: batch_size must be >= 1");
  if (step_size < 1) throw ValidationError("classifier: step_size must be >= 1");
  if (!(gamma > 0)) throw ValidationError("classifier: gamma must be > 0");
  if (input_size < 8) throw ValidationError("classifier: input_size must be >= 8");
  if (transform != "flip" && transform != "none") throw ValidationError("classifier: unknown transform '" + transform + "'");
  if (average != "macro" && average != "weighted") throw ValidationError("classifier: average must be macro or weighted");
}

void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = {{"backbone", c.backbone},     {"lr", c.lr},
       {"step_size", c.step_size},   {"gamma", c.gamma},
       {"epochs", c.epochs},         {"batch_size", c.batch_size},
       {"transform", c.transform},   {"input_size", c.input_size},
       {"weighted_sampler", c.weighted_sampler}, {"average", c.average},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  ClassifierConfig d;
  c.backbone = j.value("backbone", d.backbone);
  c.lr = j.value("lr", d.lr);
  c.step_size = j.value("step_size", d.step_size);
  c.gamma = j.value("gamma", d.gamma);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.transform = j.value("transform", d.transform);
  c.input_size = j.value("input_size", d.input_size);
  c.weighted_sampler = j.value("weighted_sampler", d.weighted_sampler);
  c.average = j.value("average", d.average);
  c.seed = j.value("seed", d.seed);
}

std::vector<double> make_sample_weights(const std::vector<Condition>& labels) {
  std::map<Condition, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  std::vector<double> w;
  w.reserve(labels.size());
  for (auto l : labels) w.push_back(1.0 / static_cast<double>(counts[l]));
  return w;
}

std::shared_ptr<ClassifierNet> make_backbone(const std::string& id, std::int64_t n_classes, int input_size) {
  if (id == "toy-cnn") return std::make_shared<ToyCnn>(n_classes);
  if (id == "toy-vit") return std::make_shared<ToyVit>(n_classes, input_size);
  throw ValidationError("unknown classifier backbone '" + id + "' (available: toy-cnn, toy-vit)");
}

std::vector<Condition> Classifier::predict(const torch::Tensor& images) const {
  torch::NoGradGuard no_grad;
  net->eval();
  auto x = images;
  if (x.size(2) != config.input_size || x.size(3) != config.input_size) {
    namespace F = torch::nn::functional;
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{config.input_size, config.input_size})
                              .mode(torch::kBilinear)
                              .align_corners(false)
                              .antialias(true));
  }
  std::vector<Condition> out;
  const std::int64_t chunk = 256;
  for (std::int64_t s = 0; s < x.size(0); s += chunk) {
    auto idx = net->forward(x.slice(0, s, std::min(x.size(0), s + chunk))).argmax(1);
    auto acc = idx.accessor<std::int64_t, 1>();
    for (std::int64_t i = 0; i < idx.size(0); ++i) out.push_back(labels[static_cast<std::size_t>(acc[i])]);
  }
  return out;
}

NamedTensors Classifier::state() const {
  NamedTensors out;
  for (const auto& p : net->named_parameters()) out.emplace_back("param." + p.key(), p.value());
  for (const auto& b : net->named_buffers()) out.emplace_back("buffer." + b.key(), b.value());
  return out;
}

Classifier train_classifier(const std::vector<const DatasetManifest*>& pools, const ClassifierConfig& config,
                            ImageStore& store, ClassifierTrainReport* report) {
  config.validate();
  std::vector<const ImageRecord*> records;
  for (const auto* p : pools) {
    for (const auto& r : p->records) records.push_back(&r);
  }
  if (records.empty()) throw ValidationError("classifier: empty training set");
  std::set<Condition> present;
  for (const auto* r : records) present.insert(r->condition);

  Classifier model;
  model.config = config;
  model.labels.assign(present.begin(), present.end());
  std::map<Condition, std::int64_t> index;
  for (std::size_t i = 0; i < model.labels.size(); ++i) index[model.labels[i]] = static_cast<std::int64_t>(i);

  std::vector<std::filesystem::path> paths;
  std::vector<std::int64_t> targets;
  std::vector<Condition> labels;
  for (const auto* r : records) {
    paths.push_back(r->image_path);
    targets.push_back(index[r->condition]);
    labels.push_back(r->condition);
  }
  torch::Tensor images = store.load_batch(paths, config.input_size);
  const auto y = torch::tensor(targets, torch::kLong);
  const auto n = static_cast<std::int64_t>(records.size());

  torch::manual_seed(derive_seed(config.seed, "classifier-init"));
  model.net = make_backbone(config.backbone, static_cast<std::int64_t>(model.labels.size()), config.input_size);
  auto gen = make_generator(derive_seed(config.seed, "classifier-train"));
  const auto w = make_sample_weights(labels);
  const auto weights = torch::tensor(w, torch::kFloat64);

  torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(config.lr));
  torch::optim::StepLR sched(opt, static_cast<unsigned>(config.step_size), config.gamma);
  ClassifierTrainReport rep;
  rep.pool_size = static_cast<std::size_t>(n);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    model.net->train();
    auto order = config.weighted_sampler ? torch::multinomial(weights, n, /*replacement=*/true, gen)
                                         : torch::randperm(n, gen, torch::kLong);
    double total = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t s = 0; s < n; s += config.batch_size) {
      auto idx = order.slice(0, s, std::min(n, s + config.batch_size));
      if (idx.size(0) < 2 && n >= 2) continue;  // batch norm needs two samples
      auto x = images.index_select(0, idx);
      if (config.transform == "flip") {
        auto flip = torch::rand({idx.size(0)}, gen) < 0.5;
        x = torch::where(flip.view({-1, 1, 1, 1}), x.flip({3}), x);
      }
      auto loss = torch::cross_entropy_loss(model.net->forward(x), y.index_select(0, idx));
      const double value = loss.item<double>();
      if (!std::isfinite(value)) throw StageError("classifier: non-finite loss in epoch " + std::to_string(epoch));
      total += value;
      ++batches;
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
    sched.step();
    rep.epoch_loss.push_back(batches ? total / static_cast<double>(batches) : 0.0);
  }
  const auto pred = model.predict(images);
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < n; ++i) correct += pred[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
  rep.train_accuracy = percent(static_cast<double>(correct), static_cast<double>(n));
  if (report) *report = std::move(rep);
  return model;
}

MetricsReport metrics_from_confusion(const std::vector<std::vector<std::int64_t>>& confusion,
                                     const std::string& average) {
  const auto k = confusion.size();
  for (const auto& row : confusion) {
    if (row.size() != k) throw ValidationError("confusion matrix must be square");
  }
  MetricsReport m;
  m.confusion = confusion;
  std::int64_t total = 0, trace = 0;
  std::vector<std::int64_t> row_sum(k, 0), col_sum(k, 0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      total += confusion[i][j];
      row_sum[i] += confusion[i][j];
      col_sum[j] += confusion[i][j];
    }
    trace += confusion[i][i];
  }
  if (total == 0) throw ValidationError("metrics: empty confusion matrix");
  m.accuracy = percent(static_cast<double>(trace), static_cast<double>(total));
  double p_sum = 0, r_sum = 0, f_sum = 0, weight_sum = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (row_sum[i] == 0 && col_sum[i] == 0) continue;
    const double tp = static_cast<double>(confusion[i][i]);
    const double p = col_sum[i] > 0 ? tp / static_cast<double>(col_sum[i]) : 0.0;
    const double r = row_sum[i] > 0 ? tp / static_cast<double>(row_sum[i]) : 0.0;
    const double f = (p + r) > 0 ? 2.0 * p * r / (p + r) : 0.0;
    const double wgt = average == "weighted" ? static_cast<double>(row_sum[i]) : 1.0;
    p_sum += wgt * p;
    r_sum += wgt * r;
    f_sum += wgt * f;
    weight_sum += wgt;
    m.per_class.push_back({Condition{}, 100.0 * p, 100.0 * r, 100.0 * f, row_sum[i]});
  }
  if (weight_sum > 0) {
    m.precision = 100.0 * p_sum / weight_sum;
    m.recall = 100.0 * r_sum / weight_sum;
    m.f1 = 100.0 * f_sum / weight_sum;
  }
  return m;
}

MetricsReport compute_metrics(const std::vector<Condition>& truth, const std::vector<Condition>& predicted,
                              const std::string& average) {
  if (truth.size() != predicted.size()) throw ValidationError("metrics: truth and predictions differ in length");
  if (truth.empty()) throw ValidationError("metrics: empty test set");
  const auto k = kAllConditions.size();
  std::vector<std::vector<std::int64_t>> confusion(k, std::vector<std::int64_t>(k, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) ++confusion[condition_index(truth[i])][condition_index(predicted[i])];
  auto m = metrics_from_confusion(confusion, average);
  m.labels.assign(kAllConditions.begin(), kAllConditions.end());
  std::size_t pc = 0;
  for (std::size_t i = 0; i < k && pc < m.per_class.size(); ++i) {
    std::int64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += confusion[i][j];
      col += confusion[j][i];
    }
    if (row == 0 && col == 0) continue;
    m.per_class[pc++].condition = kAllConditions[i];
  }
  return m;
}

MetricsReport evaluate(const Classifier& model, const DatasetManifest& test, ImageStore& store) {
  if (test.empty()) throw ValidationError("evaluate: empty test set");
  std::vector<std::filesystem::path> paths;
  std::vector<Condition> truth;
  for (const auto& r : test.records) {
    if (std::find(model.labels.begin(), model.labels.end(), r.condition) == model.labels.end()) {
      throw ValidationError("evaluate: test class '" + std::string(condition_name(r.condition)) +
                            "' is absent from the model's label space");
    }
    paths.push_back(r.image_path);
    truth.push_back(r.condition);
  }
  const auto pred = model.predict(store.load_batch(paths, model.config.input_size));
  return compute_metrics(truth, pred, model.config.average);
}

void to_json(nlohmann::json& j, const MetricsReport& m) {
  std::vector<std::string> labels;
  for (auto c : m.labels) labels.emplace_back(condition_name(c));
  nlohmann::json per = nlohmann::json::array();
  for (const auto& p : m.per_class) {
    per.push_back({{"condition", condition_name(p.condition)},
                   {"precision", p.precision},
                   {"recall", p.recall},
                   {"f1", p.f1},
                   {"support", p.support}});
  }
  j = {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
       {"labels", labels},       {"confusion", m.confusion}, {"per_class", per}};
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport m;
  m.accuracy = j.at("accuracy").get<double>();
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f1 = j.at("f1").get<double>();
  for (const auto& l : j.value("labels", std::vector<std::string>{})) {
    if (auto c = parse_condition(l)) m.labels.push_back(*c);
  }
  m.confusion = j.value("confusion", std::vector<std::vector<std::int64_t>>{});
  for (const auto& p : j.value("per_class", nlohmann::json::array())) {
    auto c = parse_condition(p.at("condition").get<std::string>());
    m.per_class.push_back({c.value_or(Condition{}), p.at("precision").get<double>(), p.at("recall").get<double>(),
                           p.at("f1").get<double>(), p.at("support").get<std::int64_t>()});
  }
  return m;
}

void save_classifier(const std::filesystem::path& path, const Classifier& model) {
  TensorArchive a;
  a.kind = kClassifierKind;
  a.format_version = kClassifierVersion;
  std::vector<std::string> labels;
  for (auto c : model.labels) labels.emplace_back(condition_name(c));
  a.meta = {{"config", model.config}, {"labels", labels}};
  for (const auto& [name, t] : model.state()) a.tensors.emplace_back(name, t.detach());
  write_archive(path, a);
}

Classifier load_classifier(const std::filesystem::path& path) {
  const auto a = read_archive(path, kClassifierKind, kClassifierVersion);
  Classifier m;
  m.config = a.meta.at("config").get<ClassifierConfig>();
  for (const auto& l : a.meta.at("labels").get<std::vector<std::string>>()) {
    auto c = parse_condition(l);
    if (!c) throw ValidationError(path.string() + ": unknown label '" + l + "'");
    m.labels.push_back(*c);
  }
  m.net = make_backbone(m.config.backbone, static_cast<std::int64_t>(m.labels.size()), m.config.input_size);
  torch::NoGradGuard no_grad;
  for (auto& [name, t] : m.state()) {
    const auto& src = a.at(name);
    if (src.sizes() != t.sizes()) throw ValidationError(path.string() + ": tensor '" + name + "' has the wrong shape");
    t.copy_(src);
  }
  return m;
}

}  // namespace dermaug
