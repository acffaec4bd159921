#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "evosam/lora/lora.hpp"
#include "evosam/matcher/matcher.hpp"
#include "evosam/model/model.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace evosam::annosvc {

class RleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// "W,H:" followed by comma-separated run lengths over the row-major pixels,
/// alternating background/foreground and starting with background (a leading
/// 0 when the first pixel is foreground).
std::string rle_encode(const Mask& m);
/// Throws RleError on malformed input or when the runs do not cover W*H.
Mask rle_decode(const std::string& s);

/// Inclusion filters applied to a recorded result.
inline constexpr double kMinIou = 0.7;
inline constexpr std::int64_t kMaxRefineMs = 40000;

struct CatalogEntry {
  std::string id;
  Image image;
  std::optional<Mask> gt;
};
/// The test split of a dataset manifest (a `manifest.json` path or its directory).
std::vector<CatalogEntry> load_catalog(const std::filesystem::path& manifest);

/// Models the service can expose. `evosam` routes through the matcher;
/// `joint` is a single-expert pool; `base` is the plain pretrained model.
struct Models {
  model::MiniSam model;
  nk::ParamStore base;
  std::optional<lora::ExpertPool> evosam;
  std::optional<matcher::MatcherState> matcher;
  std::optional<lora::ExpertPool> joint;

  /// Names of the models available, in a fixed order.
  std::vector<std::string> available() const;
};

struct ServiceConfig {
  /// Models compared in every session; each must be available.
  std::vector<std::string> models = {"base", "evosam", "joint"};
  std::uint64_t seed = 1;
  std::string cors_origin = "*";
};

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

struct ResultRecord {
  std::string image_id;
  std::string model_key;
  std::string model;
  BoxPrompt box;
  std::optional<double> initial_dice;
  std::int64_t refine_ms = 0;
  std::int64_t refine_from_edit_ms = 0;
  std::optional<double> final_dice;
  std::optional<double> final_iou;
  bool included = true;
};

/// All handlers are safe to call concurrently. Model state is read-only after
/// construction; session records sit behind a mutex.
class Service {
 public:
  Service(std::shared_ptr<const Models> models, std::vector<CatalogEntry> catalog, ServiceConfig cfg = {});

  Response list_images() const;
  Response open_session(const std::string& body);
  Response segment(const std::string& body);
  Response post_result(const std::string& session_id, const std::string& body);
  Response export_session(const std::string& session_id) const;

  /// Routes, CORS headers and preflight handling.
  void mount(httplib::Server& server);

  /// Logits from the precomputed embedding (what /segment serves).
  model::MaskLogits infer(const std::string& image_id, const std::string& model, const BoxPrompt& box) const;
  /// The same prediction computed from scratch.
  model::MaskLogits infer_cold(const std::string& image_id, const std::string& model, const BoxPrompt& box) const;

 private:
  struct Pending {
    std::string model;
    BoxPrompt box;
    std::optional<double> initial_dice;
  };
  struct Session {
    std::string annotator;
    std::map<std::string, std::string> key_to_model;
    std::vector<std::string> keys;
    std::map<std::pair<std::string, std::string>, Pending> segmented;  // (image, key)
    std::vector<ResultRecord> results;
  };

  const CatalogEntry* find_image(const std::string& id) const;
  const nk::ParamStore* encoder_of(const std::string& model) const;
  const nk::ParamStore* decoder_of(const std::string& model, const Image& x, const BoxPrompt& box) const;

  std::shared_ptr<const Models> models_;
  std::vector<CatalogEntry> catalog_;
  std::map<std::string, std::size_t> index_;
  ServiceConfig cfg_;
  // (model, image index) -> embedding; filled in the constructor, read-only afterwards.
  std::map<std::pair<std::string, std::size_t>, model::ImageEmbedding> cache_;

  mutable std::mutex mu_;
  std::map<std::string, Session> sessions_;
  std::uint64_t next_session_ = 1;
};

}  // namespace evosam::annosvc
