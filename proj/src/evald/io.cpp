#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "lndetr/evald/evald.hpp"

namespace lndetr::evald {

namespace {

constexpr const char* kPredHeader = "# lndetr-pred v1";
constexpr const char* kGtHeader = "# lndetr-gt v1";

std::ifstream open_in(const std::string& path, const char* header) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot open " + path);
  std::string first;
  std::getline(in, first);
  if (first != header) throw EvalError(path + ": expected header '" + header + "'");
  return in;
}

[[noreturn]] void bad_line(const std::string& path, int line, const std::string& text) {
  throw EvalError(path + ":" + std::to_string(line) + ": malformed line '" + text + "'");
}

std::ofstream open_out(const std::string& path, const char* header) {
  std::ofstream out(path);
  if (!out) throw EvalError("cannot write " + path);
  out.precision(std::numeric_limits<double>::max_digits10);
  out << header << '\n';
  return out;
}

}  // namespace

std::vector<PredVolume> read_predictions(const std::string& path) {
  auto in = open_in(path, kPredHeader);
  std::vector<PredVolume> out;
  std::map<std::string, std::size_t> index;
  std::string text;
  int line = 1;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty() || text[0] == '#') continue;
    std::istringstream is(text);
    std::string tag, id;
    geometry::Detection3D d;
    if (!(is >> tag >> id) || tag != "det") bad_line(path, line, text);
    if (!(is >> d.box.x0 >> d.box.y0 >> d.box.z0 >> d.box.x1 >> d.box.y1 >> d.box.z1 >> d.score))
      bad_line(path, line, text);
    std::string rest;
    if (is >> rest) bad_line(path, line, text);
    auto [it, fresh] = index.emplace(id, out.size());
    if (fresh) out.push_back({id, {}});
    out[it->second].detections.push_back(d);
  }
  return out;
}

void write_predictions(const std::string& path, const std::vector<PredVolume>& preds) {
  auto out = open_out(path, kPredHeader);
  for (const auto& p : preds)
    for (const auto& d : p.detections)
      out << "det " << p.id << ' ' << d.box.x0 << ' ' << d.box.y0 << ' ' << d.box.z0 << ' ' << d.box.x1 << ' '
          << d.box.y1 << ' ' << d.box.z1 << ' ' << d.score << '\n';
  if (!out) throw EvalError("write failed for " + path);
}

std::vector<GtVolume> read_ground_truth(const std::string& path) {
  auto in = open_in(path, kGtHeader);
  std::vector<GtVolume> out;
  std::map<std::string, std::size_t> index;
  std::string text;
  int line = 1;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty() || text[0] == '#') continue;
    std::istringstream is(text);
    std::string tag, id, rest;
    if (!(is >> tag >> id)) bad_line(path, line, text);
    if (tag == "volume") {
      GtVolume v;
      v.id = id;
      if (!(is >> v.spacing.x >> v.spacing.y >> v.spacing.z) || (is >> rest)) bad_line(path, line, text);
      if (v.spacing.x <= 0 || v.spacing.y <= 0 || v.spacing.z <= 0) bad_line(path, line, text);
      if (!index.emplace(id, out.size()).second) throw EvalError(path + ": duplicate volume " + id);
      out.push_back(v);
    } else if (tag == "box") {
      auto it = index.find(id);
      if (it == index.end()) throw EvalError(path + ":" + std::to_string(line) + ": box for undeclared volume " + id);
      auto& v = out[it->second];
      GtBox b;
      b.box.spacing = v.spacing;
      if (!(is >> b.box.x0 >> b.box.y0 >> b.box.z0 >> b.box.x1 >> b.box.y1 >> b.box.z1 >> b.short_axis_mm >> b.cls) ||
          (is >> rest) || !b.box.valid())
        bad_line(path, line, text);
      v.boxes.push_back(b);
    } else {
      bad_line(path, line, text);
    }
  }
  return out;
}

void write_ground_truth(const std::string& path, const std::vector<GtVolume>& gts) {
  auto out = open_out(path, kGtHeader);
  for (const auto& v : gts) {
    out << "volume " << v.id << ' ' << v.spacing.x << ' ' << v.spacing.y << ' ' << v.spacing.z << '\n';
    for (const auto& b : v.boxes)
      out << "box " << v.id << ' ' << b.box.x0 << ' ' << b.box.y0 << ' ' << b.box.z0 << ' ' << b.box.x1 << ' '
          << b.box.y1 << ' ' << b.box.z1 << ' ' << b.short_axis_mm << ' ' << b.cls << '\n';
  }
  if (!out) throw EvalError("write failed for " + path);
}

}  // namespace lndetr::evald
