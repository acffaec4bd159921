#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evosam/model/image.hpp"
#include "json.hpp"

namespace evosam::taskforge {

/// One (image, mask) pair. Prompts are derived from the mask when needed.
struct Sample {
  std::string id;
  Image image;
  Mask mask;
  int task = 0;      // 1-based within the protocol, 0 for the pretraining set
  int category = 0;  // vessel category, site id, or shape kind
};

struct TaskDataset {
  int task = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

enum class Scenario { vessel, site };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

inline constexpr int kVesselCategories = 9;
inline constexpr int kSites = 6;

/// Appearance recipe of one task. Vessel tasks draw curvilinear strokes of
/// their own categories over a task-specific textured background; strokes of
/// `distractors` may also appear but are never labelled.
struct TaskRecipe {
  int task = 1;
  Scenario scenario = Scenario::vessel;
  std::vector<int> categories;
  std::vector<int> distractors;
  Hsv background;
  double texture_freq = 2;  // cycles per image
  double texture_amp = 0.08;
  double noise = 0.03;
  double distractor_prob = 0.5;
  // Site tasks: grey level of the background and organ-minus-background step.
  int site = 0;
  double bias = 0.2;
  double contrast = 0.3;
};

struct ProtocolSpec {
  Scenario scenario = Scenario::vessel;
  int tasks = 3;
  int train_per_task = 200;
  int test_per_task = 50;
  std::uint64_t seed = 7;
  /// Task orders; each a permutation of 1..tasks.
  std::vector<std::vector<int>> orders;

  static ProtocolSpec vessel(int tasks, std::uint64_t seed = 7);
  static ProtocolSpec site(std::uint64_t seed = 7);

  /// Throws std::invalid_argument.
  void validate() const;
  std::string name() const;
};

void to_json(nlohmann::json& j, const ProtocolSpec& p);
void from_json(const nlohmann::json& j, ProtocolSpec& p);

/// Stroke colour of a vessel category (1..9). Odd categories are bright, even ones dark.
Hsv category_colour(int category);
/// Partition of the nine categories into 3 or 5 tasks.
std::vector<std::vector<int>> vessel_groups(int tasks);
/// All six permutations for T = 3; otherwise six seeded permutations, the
/// first of which is 4-2-3-1-5 when T = 5.
std::vector<std::vector<int>> default_orders(int tasks, std::uint64_t seed);

std::vector<TaskRecipe> recipes(const ProtocolSpec& p);
TaskRecipe site_recipe(int site);

/// n samples split 80/20 into train/test (train = round(0.8 n)).
TaskDataset gen_vessel_task(const TaskRecipe& recipe, int n, std::uint64_t seed);
TaskDataset gen_site_task(const TaskRecipe& recipe, int n, std::uint64_t seed);
/// Blobs, bars and rings in desaturated colours (saturation 0.1-0.4), one to
/// three per image; the labelled object is the visible part of one of them.
TaskDataset gen_pretrain_set(int n, std::uint64_t seed);

/// One dataset per task (task indices 1..T) with exact train/test counts.
std::vector<TaskDataset> generate(const ProtocolSpec& p);

/// Writes images (PPM), masks (PGM) and `manifest.json` under `dir`.
void save_datasets(const std::vector<TaskDataset>& sets, const std::filesystem::path& dir,
                   const nlohmann::json& extra = nlohmann::json::object());
std::vector<TaskDataset> load_datasets(const std::filesystem::path& dir);

/// Pixel values are stored at 8 bits; generators quantize so files round-trip exactly.
void quantize(Image& img);

}  // namespace evosam::taskforge
