#include "evosam/annosvc/annosvc.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <sstream>

#include "evosam/metrics/metrics.hpp"
#include "evosam/numkit/rng.hpp"
#include "evosam/taskforge/taskforge.hpp"
#include "httplib.h"

namespace evosam::annosvc {

namespace {

using nlohmann::json;

Response error(int status, const std::string& msg) { return {status, json{{"error", msg}}.dump(), "application/json"}; }
Response ok(const json& j) { return {200, j.dump(), "application/json"}; }

std::int64_t parse_int(std::string_view s) {
  std::int64_t v = -1;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) throw RleError("bad integer '" + std::string(s) + "'");
  return v;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Quotes a CSV field when needed.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

BoxPrompt parse_box(const json& j) {
  if (j.is_array() && j.size() == 4) return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
  return {j.at("x_min").get<int>(), j.at("y_min").get<int>(), j.at("x_max").get<int>(), j.at("y_max").get<int>()};
}

}  // namespace

std::string rle_encode(const Mask& m) {
  std::string out = std::to_string(m.width) + "," + std::to_string(m.height) + ":";
  std::uint8_t cur = 0;
  std::size_t run = 0;
  bool first = true;
  auto flush = [&] {
    out += (first ? "" : ",") + std::to_string(run);
    first = false;
  };
  for (std::uint8_t v : m.px) {
    const std::uint8_t b = v ? 1 : 0;
    if (b != cur) {
      flush();
      cur = b;
      run = 0;
    }
    ++run;
  }
  flush();
  return out;
}

Mask rle_decode(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw RleError("RLE lacks the 'W,H:' header");
  const std::string head = s.substr(0, colon);
  const auto comma = head.find(',');
  if (comma == std::string::npos) throw RleError("RLE header must be 'W,H'");
  const auto w = parse_int(std::string_view(head).substr(0, comma));
  const auto h = parse_int(std::string_view(head).substr(comma + 1));
  if (w <= 0 || h <= 0 || w > 4096 || h > 4096) throw RleError("RLE size out of range");
  Mask m(static_cast<int>(w), static_cast<int>(h));
  const std::size_t total = static_cast<std::size_t>(w * h);
  std::size_t pos = 0;
  std::uint8_t val = 0;
  std::string_view body = std::string_view(s).substr(colon + 1);
  if (body.empty()) throw RleError("RLE has no runs");
  while (true) {
    const auto next = body.find(',');
    const auto run = parse_int(body.substr(0, next));
    if (run < 0 || pos + static_cast<std::size_t>(run) > total) throw RleError("RLE runs exceed W*H");
    std::fill_n(m.px.begin() + static_cast<std::ptrdiff_t>(pos), run, val);
    pos += static_cast<std::size_t>(run);
    val ^= 1;
    if (next == std::string_view::npos) break;
    body = body.substr(next + 1);
  }
  if (pos != total) throw RleError("RLE runs cover " + std::to_string(pos) + " of " + std::to_string(total) + " pixels");
  return m;
}

std::vector<CatalogEntry> load_catalog(const std::filesystem::path& manifest) {
  const auto dir = std::filesystem::is_directory(manifest) ? manifest : manifest.parent_path();
  std::vector<CatalogEntry> out;
  for (auto& set : taskforge::load_datasets(dir))
    for (auto& s : set.test) out.push_back({s.id, std::move(s.image), std::move(s.mask)});
  return out;
}

std::vector<std::string> Models::available() const {
  std::vector<std::string> v = {"base"};
  if (evosam && matcher) v.push_back("evosam");
  if (joint) v.push_back("joint");
  return v;
}

Service::Service(std::shared_ptr<const Models> models, std::vector<CatalogEntry> catalog, ServiceConfig cfg)
    : models_(std::move(models)), catalog_(std::move(catalog)), cfg_(std::move(cfg)) {
  const auto avail = models_->available();
  if (cfg_.models.empty()) throw std::invalid_argument("no models to compare");
  for (const auto& m : cfg_.models)
    if (std::find(avail.begin(), avail.end(), m) == avail.end()) throw std::invalid_argument("model '" + m + "' is not loaded");
  for (std::size_t i = 0; i < catalog_.size(); ++i) {
    if (!index_.emplace(catalog_[i].id, i).second) throw std::invalid_argument("duplicate image id " + catalog_[i].id);
  }
  // Encoder outputs depend only on the image and the encoder adapter.
  for (const auto& m : cfg_.models)
    for (std::size_t i = 0; i < catalog_.size(); ++i)
      cache_.emplace(std::pair{m, i}, models_->model.encode_image(models_->base, catalog_[i].image, encoder_of(m)));
}

const CatalogEntry* Service::find_image(const std::string& id) const {
  const auto it = index_.find(id);
  return it == index_.end() ? nullptr : &catalog_[it->second];
}

const nk::ParamStore* Service::encoder_of(const std::string& m) const {
  if (m == "evosam") return &models_->evosam->encoder().params();
  if (m == "joint") return &models_->joint->encoder().params();
  return nullptr;
}

const nk::ParamStore* Service::decoder_of(const std::string& m, const Image& x, const BoxPrompt& box) const {
  if (m == "joint") return &models_->joint->decoder(1).params();
  if (m == "evosam") {
    const auto& pool = *models_->evosam;
    const int task = pool.size() > 1 ? models_->matcher->predict(x, box).task : 1;
    return &pool.decoder(task).params();
  }
  return nullptr;
}

model::MaskLogits Service::infer(const std::string& image_id, const std::string& m, const BoxPrompt& box) const {
  const auto it = index_.find(image_id);
  if (it == index_.end()) throw std::out_of_range("unknown image " + image_id);
  const auto& emb = cache_.at({m, it->second});
  const auto prompt = models_->model.encode_prompt(models_->base, box);
  return models_->model.decode_mask(models_->base, emb, prompt, decoder_of(m, catalog_[it->second].image, box));
}

model::MaskLogits Service::infer_cold(const std::string& image_id, const std::string& m, const BoxPrompt& box) const {
  const CatalogEntry* e = find_image(image_id);
  if (!e) throw std::out_of_range("unknown image " + image_id);
  return models_->model.predict(models_->base, e->image, box, encoder_of(m), decoder_of(m, e->image, box));
}

Response Service::list_images() const {
  json arr = json::array();
  for (const auto& e : catalog_)
    arr.push_back({{"id", e.id}, {"width", e.image.width}, {"height", e.image.height}, {"has_gt", e.gt.has_value()}});
  return ok(arr);
}

Response Service::open_session(const std::string& body) {
  std::string annotator = "anonymous";
  if (!body.empty()) {
    const auto j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return error(400, "body must be a JSON object");
    annotator = j.value("annotator", annotator);
  }
  std::lock_guard lock(mu_);
  const std::uint64_t n = next_session_++;
  Session s;
  s.annotator = annotator;
  std::vector<std::string> order = cfg_.models;
  nk::Rng rng(nk::Rng::mix(cfg_.seed, n));
  rng.shuffle(order.begin(), order.end());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::string key = std::string("model-") + static_cast<char>('A' + i);
    s.keys.push_back(key);
    s.key_to_model[key] = order[i];
  }
  const std::string id = "s" + std::to_string(n);
  const json keys = s.keys;
  sessions_.emplace(id, std::move(s));
  return ok({{"session_id", id}, {"model_keys", keys}});
}

Response Service::segment(const std::string& body) {
  const auto j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return error(400, "body must be a JSON object");
  std::string sid, image_id, key;
  BoxPrompt box;
  try {
    sid = j.at("session_id").get<std::string>();
    image_id = j.at("image_id").get<std::string>();
    key = j.at("model_key").get<std::string>();
    box = parse_box(j.at("box"));
  } catch (const json::exception& e) {
    return error(400, std::string("malformed request: ") + e.what());
  }
  const CatalogEntry* e = find_image(image_id);
  if (!e) return error(404, "unknown image " + image_id);
  std::string model;
  {
    std::lock_guard lock(mu_);
    const auto it = sessions_.find(sid);
    if (it == sessions_.end()) return error(404, "unknown session " + sid);
    const auto k = it->second.key_to_model.find(key);
    if (k == it->second.key_to_model.end()) return error(404, "unknown model key " + key);
    model = k->second;
  }
  if (!box.valid_for(e->image.width, e->image.height)) return error(400, "box is empty or outside the image");

  const Mask pred = infer(image_id, model, box).binarize();
  std::optional<double> d;
  if (e->gt) d = metrics::dice(pred, *e->gt);
  {
    std::lock_guard lock(mu_);
    sessions_.at(sid).segmented[{image_id, key}] = {model, box, d};
  }
  return ok({{"mask_rle", rle_encode(pred)}, {"dice_vs_gt", d ? json(*d) : json(nullptr)}});
}

Response Service::post_result(const std::string& sid, const std::string& body) {
  const auto j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return error(400, "body must be a JSON object");
  std::string image_id, key, rle;
  std::int64_t refine_ms = 0, from_edit = 0;
  try {
    image_id = j.at("image_id").get<std::string>();
    key = j.at("model_key").get<std::string>();
    rle = j.at("final_mask_rle").get<std::string>();
    refine_ms = j.at("refine_ms").get<std::int64_t>();
    from_edit = j.value("refine_from_edit_ms", refine_ms);
  } catch (const json::exception& e) {
    return error(400, std::string("malformed request: ") + e.what());
  }
  if (refine_ms < 0 || from_edit < 0) return error(400, "durations must be nonnegative");
  Mask final_mask;
  try {
    final_mask = rle_decode(rle);
  } catch (const RleError& e) {
    return error(400, std::string("malformed RLE: ") + e.what());
  }
  const CatalogEntry* e = find_image(image_id);
  if (!e) return error(404, "unknown image " + image_id);
  if (final_mask.width != e->image.width || final_mask.height != e->image.height) {
    return error(400, "mask size does not match the image");
  }

  std::lock_guard lock(mu_);
  const auto it = sessions_.find(sid);
  if (it == sessions_.end()) return error(404, "unknown session " + sid);
  Session& s = it->second;
  const auto seg = s.segmented.find({image_id, key});
  if (seg == s.segmented.end()) return error(400, "no /segment call precedes this result");
  for (const auto& r : s.results)
    if (r.image_id == image_id && r.model_key == key) return error(409, "result already recorded");

  ResultRecord r;
  r.image_id = image_id;
  r.model_key = key;
  r.model = seg->second.model;
  r.box = seg->second.box;
  r.initial_dice = seg->second.initial_dice;
  r.refine_ms = refine_ms;
  r.refine_from_edit_ms = from_edit;
  json reasons = json::array();
  if (e->gt) {
    r.final_dice = metrics::dice(final_mask, *e->gt);
    r.final_iou = metrics::iou(final_mask, *e->gt);
    if (*r.final_iou < kMinIou) reasons.push_back("iou");
  }
  if (refine_ms >= kMaxRefineMs) reasons.push_back("time");
  r.included = reasons.empty();
  s.results.push_back(r);
  return ok({{"recorded", true},
             {"final_dice", r.final_dice ? json(*r.final_dice) : json(nullptr)},
             {"final_iou", r.final_iou ? json(*r.final_iou) : json(nullptr)},
             {"included", r.included},
             {"excluded_by", reasons}});
}

Response Service::export_session(const std::string& sid) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(sid);
  if (it == sessions_.end()) return error(404, "unknown session " + sid);
  const Session& s = it->second;
  std::ostringstream os;
  os << "session_id,annotator,image_id,model_key,model,box,initial_dice,final_dice,final_iou,refine_ms,"
        "refine_from_edit_ms,included\n";
  auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& r : s.results) {
    os << sid << "," << csv_field(s.annotator) << "," << csv_field(r.image_id) << "," << r.model_key << "," << r.model
       << "," << r.box.x_min << " " << r.box.y_min << " " << r.box.x_max << " " << r.box.y_max << ","
       << opt(r.initial_dice) << "," << opt(r.final_dice) << "," << opt(r.final_iou) << "," << r.refine_ms << ","
       << r.refine_from_edit_ms << "," << (r.included ? 1 : 0) << "\n";
  }
  return {200, os.str(), "text/csv"};
}

void Service::mount(httplib::Server& server) {
  const std::string origin = cfg_.cors_origin;
  server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  auto send = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get("/images", [this, send](const httplib::Request&, httplib::Response& res) { send(res, list_images()); });
  server.Post("/sessions",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, open_session(req.body)); });
  server.Post("/segment", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, segment(req.body)); });
  server.Post(R"(/sessions/([^/]+)/result)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, post_result(req.matches[1], req.body));
  });
  server.Get(R"(/sessions/([^/]+)/export)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, export_session(req.matches[1]));
  });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", msg}}.dump(), "application/json");
  });
}

}  // namespace evosam::annosvc
