#include <bit>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lndetr/synthgen/synthgen.hpp"

namespace lndetr::synthgen {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "raw volume files are little endian");

namespace {

template <typename V>
void write_raw(const fs::path& path, const std::vector<V>& values) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(values.data()), std::streamsize(values.size() * sizeof(V)));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

template <typename V>
std::vector<V> read_raw(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  if (std::size_t(in.tellg()) != count * sizeof(V))
    throw std::runtime_error(path.string() + ": size does not match the manifest shape");
  in.seekg(0);
  std::vector<V> values(count);
  in.read(reinterpret_cast<char*>(values.data()), std::streamsize(count * sizeof(V)));
  return values;
}

json config_json(const SynthConfig& c) {
  return {{"min_targets", c.min_targets}, {"max_targets", c.max_targets},
          {"min_short_axis_mm", c.min_short_axis_mm}, {"max_short_axis_mm", c.max_short_axis_mm},
          {"tubes", c.tubes}, {"blobs", c.blobs}, {"contrast", c.contrast}, {"noise_sigma", c.noise_sigma},
          {"seed", c.seed}};
}

}  // namespace

void write_dataset(const std::string& dir, const SynthConfig& cfg, const std::vector<VolumeSample>& train,
                   const std::vector<VolumeSample>& val, const std::vector<VolumeSample>& test) {
  const fs::path root(dir);
  fs::create_directories(root / "volumes");
  json manifest = {{"format", "lndetr-dataset"},
                   {"version", 1},
                   {"shape", {cfg.width, cfg.height, cfg.depth}},
                   {"spacing", {cfg.spacing.x, cfg.spacing.y, cfg.spacing.z}},
                   {"generator", config_json(cfg)},
                   {"volumes", json::array()},
                   {"ground_truth", json::object()}};
  const std::pair<const char*, const std::vector<VolumeSample>*> splits[] = {
      {"train", &train}, {"val", &val}, {"test", &test}};
  for (const auto& [split, samples] : splits) {
    std::vector<evald::GtVolume> gts;
    for (const auto& s : *samples) {
      if (s.width != cfg.width || s.height != cfg.height || s.depth != cfg.depth)
        throw std::invalid_argument("write_dataset: volume " + s.id + " does not match the dataset shape");
      const std::string vox = "volumes/" + s.id + ".f32", lab = "volumes/" + s.id + ".u16";
      write_raw(root / vox, s.voxels);
      write_raw(root / lab, s.labels);
      manifest["volumes"].push_back(
          {{"id", s.id}, {"split", split}, {"voxels", vox}, {"labels", lab}, {"seed", s.seed}});
      gts.push_back(s.ground_truth());
    }
    const std::string gt_file = std::string("gt_") + split + ".txt";
    evald::write_ground_truth((root / gt_file).string(), gts);
    manifest["ground_truth"][split] = gt_file;
  }
  std::ofstream out(root / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
}

Dataset read_dataset(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream in(root / "manifest.json");
  if (!in) throw std::runtime_error("cannot open " + (root / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "lndetr-dataset" || manifest.value("version", 0) != 1)
    throw std::runtime_error("unsupported dataset manifest in " + dir);
  Dataset ds;
  ds.root = dir;
  try {
    const auto shape = manifest.at("shape");
    const auto sp = manifest.at("spacing");
    const int w = shape.at(0), h = shape.at(1), d = shape.at(2);
    const geometry::Spacing spacing{sp.at(0), sp.at(1), sp.at(2)};
    for (const auto& v : manifest.at("volumes")) {
      VolumeSample s;
      s.id = v.at("id");
      s.width = w;
      s.height = h;
      s.depth = d;
      s.spacing = spacing;
      s.seed = v.value("seed", std::uint64_t(0));
      const std::size_t n = std::size_t(w) * std::size_t(h) * std::size_t(d);
      s.voxels = read_raw<float>(root / v.at("voxels").get<std::string>(), n);
      s.labels = read_raw<std::uint16_t>(root / v.at("labels").get<std::string>(), n);
      recompute_boxes(s);
      const std::string split = v.at("split");
      if (split == "train")
        ds.train.push_back(std::move(s));
      else if (split == "val")
        ds.val.push_back(std::move(s));
      else if (split == "test")
        ds.test.push_back(std::move(s));
      else
        throw std::runtime_error("unknown split '" + split + "'");
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest: " + std::string(e.what()));
  }
  return ds;
}

}  // namespace lndetr::synthgen
