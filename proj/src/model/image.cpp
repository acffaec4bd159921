#include "evosam/model/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

namespace evosam {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(px.begin(), px.end(), [](std::uint8_t v) { return v != 0; }));
}

Rgb hsv_to_rgb(Hsv c) {
  float h = c.h - std::floor(c.h);
  h *= 6.f;
  const int sector = std::min(static_cast<int>(h), 5);
  const float f = h - static_cast<float>(sector);
  const float p = c.v * (1.f - c.s), q = c.v * (1.f - c.s * f), t = c.v * (1.f - c.s * (1.f - f));
  switch (sector) {
    case 0: return {c.v, t, p};
    case 1: return {q, c.v, p};
    case 2: return {p, c.v, t};
    case 3: return {p, q, c.v};
    case 4: return {t, p, c.v};
    default: return {c.v, p, q};
  }
}

Hsv rgb_to_hsv(Rgb c) {
  const float mx = std::max({c.r, c.g, c.b}), mn = std::min({c.r, c.g, c.b});
  const float delta = mx - mn;
  Hsv o{0.f, mx > 0.f ? delta / mx : 0.f, mx};
  if (delta <= 0.f) return o;
  float h;
  if (mx == c.r) h = (c.g - c.b) / delta;
  else if (mx == c.g) h = 2.f + (c.b - c.r) / delta;
  else h = 4.f + (c.r - c.g) / delta;
  h /= 6.f;
  o.h = h - std::floor(h);
  return o;
}

BoxPrompt tight_bbox(const Mask& m) {
  int x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) throw std::invalid_argument("tight_bbox: empty mask");
  return {x0, y0, x1 + 1, y1 + 1};
}

namespace {

void write_header(std::ofstream& f, const char* magic, int w, int h) { f << magic << "\n" << w << " " << h << "\n255\n"; }

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

struct Header {
  int w, h, maxval;
};

Header read_header(std::ifstream& f, const std::string& magic, const std::filesystem::path& path) {
  if (next_token(f) != magic) throw ImageIoError(path.string() + ": expected " + magic);
  try {
    Header hd{std::stoi(next_token(f)), std::stoi(next_token(f)), std::stoi(next_token(f))};
    if (hd.w <= 0 || hd.h <= 0 || hd.maxval != 255) throw ImageIoError(path.string() + ": unsupported header");
    return hd;
  } catch (const std::logic_error&) {
    throw ImageIoError(path.string() + ": malformed header");
  }
}

}  // namespace

void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ImageIoError("cannot write " + path.string());
  write_header(f, "P6", img.width, img.height);
  std::vector<unsigned char> buf(img.rgb.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<unsigned char>(std::lround(std::clamp(img.rgb[i], 0.f, 1.f) * 255.f));
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageIoError("cannot read " + path.string());
  const Header hd = read_header(f, "P6", path);
  Image img(hd.w, hd.h);
  std::vector<unsigned char> buf(img.rgb.size());
  if (!f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw ImageIoError(path.string() + ": truncated pixel data");
  }
  for (std::size_t i = 0; i < buf.size(); ++i) img.rgb[i] = static_cast<float>(buf[i]) / 255.f;
  return img;
}

void write_pgm(const Mask& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ImageIoError("cannot write " + path.string());
  write_header(f, "P5", m.width, m.height);
  std::vector<unsigned char> buf(m.px.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = m.px[i] ? 255 : 0;
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Mask read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageIoError("cannot read " + path.string());
  const Header hd = read_header(f, "P5", path);
  Mask m(hd.w, hd.h);
  std::vector<unsigned char> buf(m.px.size());
  if (!f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw ImageIoError(path.string() + ": truncated pixel data");
  }
  for (std::size_t i = 0; i < buf.size(); ++i) m.px[i] = buf[i] >= 128 ? 1 : 0;
  return m;
}

}  // namespace evosam
