#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace dermaug {

/// Reads an 8-bit PNG or baseline JPEG into a float tensor [3, H, W] in [0, 1].
torch::Tensor read_image(const std::filesystem::path& path);

/// Writes a [3, H, W] tensor in [0, 1] as an 8-bit RGB PNG. Output bytes are a
/// pure function of the quantized pixels.
void write_png(const std::filesystem::path& path, const torch::Tensor& chw);

/// Quantizes to the 8-bit grid a PNG round trip would produce.
torch::Tensor quantize_8bit(const torch::Tensor& chw);

/// Bilinear resize of a [3, H, W] image to [3, size, size]; identity when already sized.
torch::Tensor resize_square(const torch::Tensor& chw, int size);

/// Read-through image cache that logs every distinct file it opened.
///
/// Every pipeline stage loads pixels through one of these, so the access log is
/// the ground truth for what a stage consumed.
class ImageStore {
 public:
  /// Loads `path` resized to `size` x `size`.
  torch::Tensor load(const std::filesystem::path& path, int size);

  /// Stacks images into [N, 3, size, size].
  torch::Tensor load_batch(const std::vector<std::filesystem::path>& paths, int size);

  /// Paths read since construction or the last `reset_log()`, in first-read order.
  std::vector<std::string> reads() const;
  void reset_log();

 private:
  mutable std::mutex mutex_;
  std::map<std::pair<std::string, int>, torch::Tensor> cache_;
  std::vector<std::string> log_;
  std::map<std::string, bool> logged_;
};

}  // namespace dermaug
