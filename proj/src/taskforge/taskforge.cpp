#include "evosam/taskforge/taskforge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

#include "evosam/numkit/rng.hpp"

namespace evosam::taskforge {

namespace {

constexpr int kSize = 64;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

// Two oriented sinusoids; returns a value in [-amp, amp].
struct Texture {
  double freq, amp;
  double ang[2], phase[2];

  Texture(double f, double a, nk::Rng& rng) : freq(f), amp(a) {
    for (int k = 0; k < 2; ++k) {
      ang[k] = rng.uniform(0.0, std::numbers::pi);
      phase[k] = rng.uniform(0.0, kTwoPi);
    }
  }
  double at(int x, int y) const {
    double s = 0;
    for (int k = 0; k < 2; ++k) {
      const double u = (x * std::cos(ang[k]) + y * std::sin(ang[k])) / kSize;
      s += std::sin(kTwoPi * freq * u + phase[k]);
    }
    return 0.5 * amp * s;
  }
};

void paint_background(Image& img, Hsv base, const Texture& tex, double noise, nk::Rng& rng) {
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      Hsv c = base;
      c.v = clamp01(c.v + tex.at(x, y));
      const Rgb rgb = hsv_to_rgb(c);
      img.at(x, y, 0) = clamp01(rgb.r + noise * rng.normal());
      img.at(x, y, 1) = clamp01(rgb.g + noise * rng.normal());
      img.at(x, y, 2) = clamp01(rgb.b + noise * rng.normal());
    }
  }
}

// Smooth random walk: heading drifts with a slowly varying curvature.
Mask random_stroke(nk::Rng& rng, const Mask* near = nullptr) {
  Mask m(kSize, kSize);
  double x = rng.uniform(10, 54), y = rng.uniform(10, 54);
  if (near) {
    // Start close to a random pixel of `near` so the strokes share a neighbourhood.
    std::vector<int> on;
    for (int i = 0; i < kSize * kSize; ++i)
      if (near->px[static_cast<std::size_t>(i)]) on.push_back(i);
    const int pick = on[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(on.size()) - 1))];
    x = std::clamp(pick % kSize + rng.uniform(-6, 6), 2.0, kSize - 2.0);
    y = std::clamp(pick / kSize + rng.uniform(-6, 6), 2.0, kSize - 2.0);
  }
  double heading = rng.uniform(0, kTwoPi), curvature = 0;
  const int steps = rng.uniform_int(30, 60);
  const double radius = rng.uniform_int(2, 5) / 2.0;
  const int reach = static_cast<int>(std::ceil(radius));
  for (int s = 0; s < steps; ++s) {
    for (int dy = -reach; dy <= reach; ++dy) {
      for (int dx = -reach; dx <= reach; ++dx) {
        const int px = static_cast<int>(std::floor(x)) + dx, py = static_cast<int>(std::floor(y)) + dy;
        if (px < 0 || py < 0 || px >= kSize || py >= kSize) continue;
        const double ex = px + 0.5 - x, ey = py + 0.5 - y;
        if (ex * ex + ey * ey <= radius * radius) m.at(px, py) = 1;
      }
    }
    curvature = std::clamp(curvature + 0.04 * rng.normal(), -0.12, 0.12);
    heading += curvature;
    x += std::cos(heading);
    y += std::sin(heading);
    if (x < 1 || y < 1 || x > kSize - 1 || y > kSize - 1) break;
  }
  return m;
}

Rgb jittered(Hsv c, nk::Rng& rng) {
  c.h += static_cast<float>(rng.uniform(-0.02, 0.02));
  c.s = clamp01(c.s + rng.uniform(-0.05, 0.05));
  c.v = clamp01(c.v + rng.uniform(-0.05, 0.05));
  return hsv_to_rgb(c);
}

void paint(Image& img, const Mask& m, Rgb c, double noise, nk::Rng& rng) {
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      if (!m.at(x, y)) continue;
      img.at(x, y, 0) = clamp01(c.r + noise * rng.normal());
      img.at(x, y, 1) = clamp01(c.g + noise * rng.normal());
      img.at(x, y, 2) = clamp01(c.b + noise * rng.normal());
    }
  }
}

void split(TaskDataset& ds, std::vector<Sample> all) {
  const auto n_train = static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(all.size())));
  ds.train.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(all.begin() + n_train));
  ds.test.assign(std::make_move_iterator(all.begin() + n_train), std::make_move_iterator(all.end()));
}

std::string sample_id(const char* prefix, int task, int idx) {
  return std::string(prefix) + std::to_string(task) + "_" + std::to_string(idx);
}

Sample vessel_sample(const TaskRecipe& r, std::uint64_t seed, int idx) {
  nk::Rng rng(nk::Rng::mix(seed, static_cast<std::uint64_t>(idx)));
  Sample s;
  s.task = r.task;
  s.id = sample_id("v", r.task, idx);
  s.image = Image(kSize, kSize);
  Hsv bg = r.background;
  bg.h += static_cast<float>(rng.uniform(-0.02, 0.02));
  bg.v = clamp01(bg.v + rng.uniform(-0.05, 0.05));
  paint_background(s.image, bg, Texture(r.texture_freq, r.texture_amp, rng), r.noise, rng);

  s.category = r.categories[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(r.categories.size()) - 1))];
  do {
    s.mask = random_stroke(rng);
  } while (s.mask.count() < 20);
  // The distractor is painted first so the labelled stroke stays fully visible.
  if (!r.distractors.empty() && rng.bernoulli(r.distractor_prob)) {
    const int c = r.distractors[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(r.distractors.size()) - 1))];
    paint(s.image, random_stroke(rng, &s.mask), jittered(category_colour(c), rng), r.noise, rng);
  }
  paint(s.image, s.mask, jittered(category_colour(s.category), rng), r.noise, rng);
  quantize(s.image);
  return s;
}

// Ellipse with a low-order radial wobble.
struct Blob {
  double cx, cy, a, b, rot, w2, w3, p2, p3;

  Blob(nk::Rng& rng, double cx_, double cy_, double rmin, double rmax) : cx(cx_), cy(cy_) {
    a = rng.uniform(rmin, rmax);
    b = rng.uniform(rmin, rmax);
    rot = rng.uniform(0, std::numbers::pi);
    w2 = rng.uniform(0.0, 0.12);
    w3 = rng.uniform(0.0, 0.08);
    p2 = rng.uniform(0, kTwoPi);
    p3 = rng.uniform(0, kTwoPi);
  }
  // Scaled radius at the pixel centre: inside when < 1.
  double level(int x, int y) const {
    const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
    const double u = dx * std::cos(rot) + dy * std::sin(rot);
    const double v = -dx * std::sin(rot) + dy * std::cos(rot);
    const double phi = std::atan2(v, u);
    const double wobble = 1.0 + w2 * std::sin(2 * phi + p2) + w3 * std::sin(3 * phi + p3);
    return std::sqrt((u / a) * (u / a) + (v / b) * (v / b)) / wobble;
  }
};

Mask shape_mask(int kind, nk::Rng& rng) {
  Mask m(kSize, kSize);
  const double cx = rng.uniform(12, 52), cy = rng.uniform(12, 52);
  if (kind == 0) {
    const Blob blob(rng, cx, cy, 5, 16);
    for (int y = 0; y < kSize; ++y)
      for (int x = 0; x < kSize; ++x) m.at(x, y) = blob.level(x, y) < 1.0;
  } else if (kind == 1) {
    const double len = rng.uniform(15, 45) / 2, half_w = rng.uniform(1.5, 4.0), ang = rng.uniform(0, std::numbers::pi);
    for (int y = 0; y < kSize; ++y) {
      for (int x = 0; x < kSize; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = dx * std::cos(ang) + dy * std::sin(ang), v = -dx * std::sin(ang) + dy * std::cos(ang);
        m.at(x, y) = std::abs(u) <= len && std::abs(v) <= half_w;
      }
    }
  } else {
    const double r = rng.uniform(6, 16), t = rng.uniform(2, 4);
    for (int y = 0; y < kSize; ++y) {
      for (int x = 0; x < kSize; ++x) {
        const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
        m.at(x, y) = d <= r && d >= r - t;
      }
    }
  }
  return m;
}

}  // namespace

std::string to_string(Scenario s) { return s == Scenario::vessel ? "vessel" : "site"; }

Scenario scenario_from_string(const std::string& s) {
  if (s == "vessel") return Scenario::vessel;
  if (s == "site") return Scenario::site;
  throw std::invalid_argument("unknown scenario '" + s + "'");
}

void quantize(Image& img) {
  for (auto& v : img.rgb) v = static_cast<float>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f)) / 255.f;
}

Hsv category_colour(int category) {
  if (category < 1 || category > kVesselCategories) throw std::invalid_argument("vessel category out of range");
  const float hue = static_cast<float>(category - 1) / kVesselCategories;
  return category % 2 == 1 ? Hsv{hue, 0.85f, 0.92f} : Hsv{hue, 0.85f, 0.22f};
}

std::vector<std::vector<int>> vessel_groups(int tasks) {
  if (tasks == 3) return {{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
  if (tasks == 5) return {{1, 2}, {3, 4}, {5, 6}, {7, 8}, {9}};
  throw std::invalid_argument("vessel protocol needs 3 or 5 tasks");
}

std::vector<std::vector<int>> default_orders(int tasks, std::uint64_t seed) {
  std::vector<int> base(static_cast<std::size_t>(tasks));
  for (int i = 0; i < tasks; ++i) base[static_cast<std::size_t>(i)] = i + 1;
  std::vector<std::vector<int>> out;
  if (tasks == 3) {
    do out.push_back(base);
    while (std::next_permutation(base.begin(), base.end()));
    return out;
  }
  std::set<std::vector<int>> seen;
  if (tasks == 5) {
    out.push_back({4, 2, 3, 1, 5});
  } else {
    out.push_back(base);
  }
  seen.insert(out.front());
  nk::Rng rng(nk::Rng::mix(seed, 0x0de5));
  while (out.size() < 6) {
    auto p = base;
    rng.shuffle(p.begin(), p.end());
    if (seen.insert(p).second) out.push_back(p);
  }
  return out;
}

ProtocolSpec ProtocolSpec::vessel(int tasks, std::uint64_t seed) {
  ProtocolSpec p;
  p.scenario = Scenario::vessel;
  p.tasks = tasks;
  p.seed = seed;
  p.orders = default_orders(tasks, seed);
  return p;
}

ProtocolSpec ProtocolSpec::site(std::uint64_t seed) {
  ProtocolSpec p;
  p.scenario = Scenario::site;
  p.tasks = kSites;
  p.seed = seed;
  p.orders = default_orders(kSites, seed);
  return p;
}

std::string ProtocolSpec::name() const { return to_string(scenario) + std::to_string(tasks); }

void ProtocolSpec::validate() const {
  if (scenario == Scenario::vessel && tasks != 3 && tasks != 5) throw std::invalid_argument("vessel protocols have 3 or 5 tasks");
  if (scenario == Scenario::site && tasks != kSites) throw std::invalid_argument("the site protocol has 6 tasks");
  if (train_per_task < 1 || test_per_task < 1) throw std::invalid_argument("per-task sample counts must be positive");
  if (orders.empty()) throw std::invalid_argument("protocol lists no task orders");
  for (const auto& o : orders) {
    auto sorted = o;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < tasks; ++i) {
      if (static_cast<int>(sorted.size()) != tasks || sorted[static_cast<std::size_t>(i)] != i + 1) {
        throw std::invalid_argument("task order is not a permutation of 1.." + std::to_string(tasks));
      }
    }
  }
}

void to_json(nlohmann::json& j, const ProtocolSpec& p) {
  j = {{"scenario", to_string(p.scenario)}, {"tasks", p.tasks},         {"train_per_task", p.train_per_task},
       {"test_per_task", p.test_per_task},  {"seed", p.seed},           {"orders", p.orders}};
}

void from_json(const nlohmann::json& j, ProtocolSpec& p) {
  p.scenario = scenario_from_string(j.value("scenario", std::string("vessel")));
  p.tasks = j.value("tasks", p.scenario == Scenario::vessel ? 3 : kSites);
  p.train_per_task = j.value("train_per_task", 200);
  p.test_per_task = j.value("test_per_task", 50);
  p.seed = j.value("seed", std::uint64_t{7});
  if (j.contains("orders")) {
    p.orders = j.at("orders").get<std::vector<std::vector<int>>>();
  } else {
    p.orders = default_orders(p.tasks, p.seed);
  }
}

TaskRecipe site_recipe(int site) {
  if (site < 1 || site > kSites) throw std::invalid_argument("site id must be in 1..6");
  TaskRecipe r;
  r.task = site;
  r.site = site;
  r.scenario = Scenario::site;
  r.categories = {site};
  const int k = site - 1;
  r.bias = 0.15 + 0.06 * k;
  r.contrast = 0.34 - 0.03 * k;
  r.noise = 0.02 + 0.012 * k;
  r.texture_freq = 1.5 + 0.75 * k;
  r.texture_amp = 0.04;
  r.background = Hsv{0.f, 0.f, static_cast<float>(r.bias)};
  return r;
}

std::vector<TaskRecipe> recipes(const ProtocolSpec& p) {
  p.validate();
  std::vector<TaskRecipe> out;
  if (p.scenario == Scenario::site) {
    for (int s = 1; s <= kSites; ++s) out.push_back(site_recipe(s));
    return out;
  }
  const auto groups = vessel_groups(p.tasks);
  for (int t = 1; t <= p.tasks; ++t) {
    TaskRecipe r;
    r.task = t;
    r.scenario = Scenario::vessel;
    r.categories = groups[static_cast<std::size_t>(t - 1)];
    for (int u = 1; u <= p.tasks; ++u)
      if (u != t) for (int c : groups[static_cast<std::size_t>(u - 1)]) r.distractors.push_back(c);
    // Backgrounds are spread evenly around the hue circle. At mid value the
    // tasks look alike once centred (every channel sits below 0.5), so they
    // are lighter; dark strokes and hue keep the bright ones visible.
    r.background = Hsv{static_cast<float>((t - 1) + 0.5) / static_cast<float>(p.tasks), 0.55f, 0.8f};
    r.texture_freq = 2.0 + 1.5 * (t - 1);
    r.texture_amp = 0.08;
    r.noise = 0.025 + 0.005 * (t - 1);
    r.distractor_prob = 0.8;
    out.push_back(r);
  }
  return out;
}

TaskDataset gen_vessel_task(const TaskRecipe& recipe, int n, std::uint64_t seed) {
  if (recipe.categories.empty()) throw std::invalid_argument("vessel recipe without categories");
  std::vector<Sample> all;
  all.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all.push_back(vessel_sample(recipe, seed, i));
  TaskDataset ds;
  ds.task = recipe.task;
  split(ds, std::move(all));
  return ds;
}

TaskDataset gen_site_task(const TaskRecipe& recipe, int n, std::uint64_t seed) {
  const TaskRecipe r = site_recipe(recipe.site);
  std::vector<Sample> all;
  for (int i = 0; i < n; ++i) {
    // Shape draws ignore the site so that every site sees the same organs.
    nk::Rng shape_rng(nk::Rng::mix(seed, static_cast<std::uint64_t>(i)));
    nk::Rng look_rng(nk::Rng::mix(nk::Rng::mix(seed, 0x517e + static_cast<std::uint64_t>(r.site)), i));
    const Blob organ(shape_rng, 32 + shape_rng.uniform(-4, 4), 32 + shape_rng.uniform(-4, 4), 10, 18);
    const Texture tex(r.texture_freq, r.texture_amp, look_rng);
    Sample s;
    s.task = recipe.task;
    s.category = r.site;
    s.id = sample_id("s", r.site, i);
    s.image = Image(kSize, kSize);
    s.mask = Mask(kSize, kSize);
    for (int y = 0; y < kSize; ++y) {
      for (int x = 0; x < kSize; ++x) {
        const bool inside = organ.level(x, y) < 1.0;
        s.mask.at(x, y) = inside;
        const float g = clamp01(r.bias + (inside ? r.contrast : 0.0) + tex.at(x, y) + r.noise * look_rng.normal());
        for (int c = 0; c < 3; ++c) s.image.at(x, y, c) = g;
      }
    }
    quantize(s.image);
    all.push_back(std::move(s));
  }
  TaskDataset ds;
  ds.task = recipe.task;
  split(ds, std::move(all));
  return ds;
}

TaskDataset gen_pretrain_set(int n, std::uint64_t seed) {
  std::vector<Sample> all;
  for (int i = 0; i < n; ++i) {
    nk::Rng rng(nk::Rng::mix(nk::Rng::mix(seed, 0x9e7a), static_cast<std::uint64_t>(i)));
    Sample s;
    s.id = sample_id("p", 0, i);
    s.image = Image(kSize, kSize);
    const Hsv bg{static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform(0.1, 0.4)),
                 static_cast<float>(rng.uniform(0.15, 0.85))};
    paint_background(s.image, bg, Texture(rng.uniform(1, 8), rng.uniform(0, 0.1), rng), rng.uniform(0.01, 0.05), rng);
    const int objects = rng.uniform_int(1, 3);
    const int target = rng.uniform_int(0, objects - 1);
    std::vector<Mask> masks;
    for (int o = 0; o < objects; ++o) {
      const int kind = rng.uniform_int(0, 2);
      if (o == target) s.category = kind;
      Mask m = shape_mask(kind, rng);
      // Foreground value differs from the background by at least 0.25.
      float v = static_cast<float>(rng.uniform(0.05, 0.95));
      if (std::abs(v - bg.v) < 0.25f) v = bg.v > 0.5f ? bg.v - 0.3f : bg.v + 0.3f;
      const Hsv fg{static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform(0.1, 0.4)), v};
      paint(s.image, m, hsv_to_rgb(fg), 0.02, rng);
      for (auto& prev : masks)
        for (std::size_t k = 0; k < prev.px.size(); ++k) prev.px[k] &= static_cast<std::uint8_t>(!m.px[k]);
      masks.push_back(std::move(m));
    }
    s.mask = masks[static_cast<std::size_t>(target)];
    if (s.mask.count() < 10) {
      // Mostly hidden target: fall back to the top-most object, which is never occluded.
      s.mask = masks.back();
    }
    quantize(s.image);
    all.push_back(std::move(s));
  }
  TaskDataset ds;
  split(ds, std::move(all));
  return ds;
}

std::vector<TaskDataset> generate(const ProtocolSpec& p) {
  const auto rs = recipes(p);
  std::vector<TaskDataset> out;
  const int n = p.train_per_task + p.test_per_task;
  for (const auto& r : rs) {
    const std::uint64_t seed = nk::Rng::mix(p.seed, static_cast<std::uint64_t>(r.task));
    TaskDataset full = p.scenario == Scenario::vessel ? gen_vessel_task(r, n, seed) : gen_site_task(r, n, seed);
    // Exact counts regardless of the 80/20 rounding.
    std::vector<Sample> all = std::move(full.train);
    all.insert(all.end(), std::make_move_iterator(full.test.begin()), std::make_move_iterator(full.test.end()));
    TaskDataset ds;
    ds.task = r.task;
    ds.train.assign(all.begin(), all.begin() + p.train_per_task);
    ds.test.assign(all.begin() + p.train_per_task, all.end());
    out.push_back(std::move(ds));
  }
  return out;
}

void save_datasets(const std::vector<TaskDataset>& sets, const std::filesystem::path& dir, const nlohmann::json& extra) {
  std::filesystem::create_directories(dir / "images");
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& ds : sets) {
    for (const auto* part : {&ds.train, &ds.test}) {
      const std::string split_name = part == &ds.train ? "train" : "test";
      for (const auto& s : *part) {
        const std::string img = "images/" + s.id + ".ppm", msk = "images/" + s.id + "_mask.pgm";
        write_ppm(s.image, dir / img);
        write_pgm(s.mask, dir / msk);
        samples.push_back({{"id", s.id},
                           {"image", img},
                           {"mask", msk},
                           {"task", ds.task},
                           {"category", s.category},
                           {"split", split_name}});
      }
    }
  }
  nlohmann::json j = extra;
  j["format"] = "evosam-dataset-1";
  j["samples"] = std::move(samples);
  std::ofstream f(dir / "manifest.json");
  if (!f) throw ImageIoError("cannot write " + (dir / "manifest.json").string());
  f << j.dump(1) << "\n";
}

std::vector<TaskDataset> load_datasets(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw ImageIoError("no manifest.json in " + dir.string());
  const auto j = nlohmann::json::parse(f);
  if (j.value("format", "") != "evosam-dataset-1") throw ImageIoError("unrecognized manifest format in " + dir.string());
  std::vector<TaskDataset> out;
  for (const auto& e : j.at("samples")) {
    const int task = e.at("task").get<int>();
    auto it = std::find_if(out.begin(), out.end(), [&](const TaskDataset& d) { return d.task == task; });
    if (it == out.end()) {
      out.push_back(TaskDataset{task, {}, {}});
      it = out.end() - 1;
    }
    Sample s;
    s.id = e.at("id").get<std::string>();
    s.task = task;
    s.category = e.at("category").get<int>();
    s.image = read_ppm(dir / e.at("image").get<std::string>());
    s.mask = read_pgm(dir / e.at("mask").get<std::string>());
    (e.at("split").get<std::string>() == "train" ? it->train : it->test).push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const TaskDataset& a, const TaskDataset& b) { return a.task < b.task; });
  return out;
}

}  // namespace evosam::taskforge
