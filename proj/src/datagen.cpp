#include "datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace oodb {

namespace fs = std::filesystem;

const char* to_string(Provenance p) {
  return p == Provenance::Procedural ? "procedural" : "idx_ingested";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "procedural") return Provenance::Procedural;
  if (s == "idx_ingested") return Provenance::IdxIngested;
  fail(ErrorKind::Format, "unknown dataset provenance '" + s + "'");
}

std::uint8_t pixel_to_byte(double p) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0));
}

void GridSpec::validate() const {
  require(num_categories >= 1, ErrorKind::InvalidArgument, "num_categories must be >= 1");
  require(num_conditions >= 1, ErrorKind::InvalidArgument, "num_conditions must be >= 1");
  require(rows >= 1 && cols >= 1, ErrorKind::InvalidArgument, "grid rows/cols must be >= 1");
  require(glyph_size >= 2, ErrorKind::InvalidArgument, "glyph_size must be >= 2");
  require(canvas_size >= rows * glyph_size && canvas_size >= cols * glyph_size,
          ErrorKind::InvalidArgument,
          "canvas_size " + std::to_string(canvas_size) + " cannot hold a " +
              std::to_string(rows) + "x" + std::to_string(cols) + " grid of " +
              std::to_string(glyph_size) + "px glyphs");
  require(samples_per_combination >= 0, ErrorKind::InvalidArgument,
          "samples_per_combination must be >= 0");
  require(noise_std >= 0.0, ErrorKind::InvalidArgument, "noise_std must be >= 0");
  if (cells.empty()) {
    require(num_conditions == rows * cols, ErrorKind::InvalidArgument,
            "num_conditions must equal rows*cols when no explicit cells are given");
  } else {
    require(static_cast<int>(cells.size()) == num_conditions, ErrorKind::InvalidArgument,
            "cells must list one grid cell per condition");
    std::set<int> seen;
    for (int c : cells) {
      require(c >= 0 && c < rows * cols, ErrorKind::InvalidArgument,
              "cell index " + std::to_string(c) + " outside the grid");
      require(seen.insert(c).second, ErrorKind::InvalidArgument,
              "cell index " + std::to_string(c) + " used twice");
    }
  }
}

std::vector<int> GridSpec::condition_cells() const {
  if (!cells.empty()) return cells;
  std::vector<int> all(static_cast<std::size_t>(rows * cols));
  for (int i = 0; i < rows * cols; ++i) all[i] = i;
  return all;
}

Dataset Dataset::empty_like() const {
  Dataset d = *this;
  d.items.clear();
  return d;
}

void Dataset::validate() const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    require(it.category >= 0 && it.category < num_categories && it.condition >= 0 &&
                it.condition < num_conditions,
            ErrorKind::Consistency, "item " + std::to_string(i) + " label out of range");
    require(it.pixels.size() == image_size(), ErrorKind::Consistency,
            "item " + std::to_string(i) + " has wrong pixel count");
  }
}

// ---- glyphs ----------------------------------------------------------------

namespace {

struct Point {
  double x, y;
};
using Polyline = std::vector<Point>;

// Stroke templates in unit coordinates (y grows downwards). Loosely digit-like
// so the ten families are visually distinct.
const std::array<std::vector<Polyline>, 10>& stroke_templates() {
  static const std::array<std::vector<Polyline>, 10> templates = {{
      {{{0.3, 0.15}, {0.7, 0.15}, {0.7, 0.85}, {0.3, 0.85}, {0.3, 0.15}}},
      {{{0.38, 0.28}, {0.52, 0.15}, {0.52, 0.85}}, {{0.38, 0.85}, {0.66, 0.85}}},
      {{{0.3, 0.22}, {0.5, 0.13}, {0.7, 0.25}, {0.68, 0.45}, {0.3, 0.85}, {0.72, 0.85}}},
      {{{0.3, 0.15}, {0.7, 0.15}, {0.48, 0.48}, {0.7, 0.68}, {0.55, 0.87}, {0.28, 0.82}}},
      {{{0.62, 0.85}, {0.62, 0.15}, {0.25, 0.62}, {0.76, 0.62}}},
      {{{0.7, 0.15}, {0.32, 0.15}, {0.3, 0.48}, {0.68, 0.5}, {0.7, 0.85}, {0.3, 0.85}}},
      {{{0.66, 0.15}, {0.32, 0.5}, {0.3, 0.85}, {0.7, 0.85}, {0.7, 0.55}, {0.32, 0.55}}},
      {{{0.28, 0.15}, {0.72, 0.15}, {0.42, 0.86}}, {{0.4, 0.5}, {0.64, 0.5}}},
      {{{0.3, 0.15}, {0.7, 0.15}, {0.7, 0.85}, {0.3, 0.85}, {0.3, 0.15}},
       {{0.3, 0.5}, {0.7, 0.5}}},
      {{{0.7, 0.5}, {0.3, 0.5}, {0.3, 0.15}, {0.7, 0.15}, {0.7, 0.85}, {0.4, 0.85}}},
  }};
  return templates;
}

std::vector<Polyline> strokes_for(int category) {
  const auto& t = stroke_templates();
  if (category < static_cast<int>(t.size())) return t[category];
  // Beyond the fixed families: a hashed five-point polyline.
  Rng rng(hash64({0x676c797068ULL, static_cast<std::uint64_t>(category)}));
  Polyline line;
  for (int i = 0; i < 5; ++i) line.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.15, 0.85)});
  return {line};
}

double segment_distance(double px, double py, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = a.x + t * dx - px, qy = a.y + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

}  // namespace

std::vector<float> render_glyph(int category, std::uint64_t style_seed, int glyph_size,
                                int num_categories) {
  require(category >= 0 && category < num_categories, ErrorKind::InvalidArgument,
          "category " + std::to_string(category) + " out of range [0," +
              std::to_string(num_categories) + ")");
  require(glyph_size >= 2, ErrorKind::InvalidArgument, "glyph_size must be >= 2");

  Rng rng(hash64({style_seed, static_cast<std::uint64_t>(category)}));
  const double size = glyph_size;
  const double scale = rng.uniform(0.85, 1.05);
  const double angle = rng.uniform(-0.12, 0.12);
  const double shift_x = rng.uniform(-0.06, 0.06);
  const double shift_y = rng.uniform(-0.06, 0.06);
  const double thickness = size * rng.uniform(0.08, 0.14);
  const double ca = std::cos(angle), sa = std::sin(angle);

  // Template points into pixel space.
  std::vector<std::vector<Point>> strokes;
  for (const auto& line : strokes_for(category)) {
    std::vector<Point> pts;
    for (auto p : line) {
      const double ux = (p.x - 0.5) * scale, uy = (p.y - 0.5) * scale;
      const double rx = ca * ux - sa * uy + 0.5 + shift_x;
      const double ry = sa * ux + ca * uy + 0.5 + shift_y;
      pts.push_back({rx * size, ry * size});
    }
    strokes.push_back(std::move(pts));
  }

  std::vector<float> patch(static_cast<std::size_t>(glyph_size) * glyph_size, 0.0f);
  for (int r = 0; r < glyph_size; ++r) {
    for (int c = 0; c < glyph_size; ++c) {
      const double px = c + 0.5, py = r + 0.5;
      double best = 1e9;
      for (const auto& pts : strokes)
        for (std::size_t k = 0; k + 1 < pts.size(); ++k)
          best = std::min(best, segment_distance(px, py, pts[k], pts[k + 1]));
      // One-pixel linear falloff around the stroke core.
      const double v = std::clamp(0.5 + thickness / 2.0 - best, 0.0, 1.0);
      patch[static_cast<std::size_t>(r) * glyph_size + c] = static_cast<float>(v);
    }
  }
  return patch;
}

namespace {

void paste(std::vector<double>& canvas, int canvas_size, const std::vector<float>& patch,
           int patch_size, int top, int left) {
  for (int r = 0; r < patch_size; ++r)
    for (int c = 0; c < patch_size; ++c)
      canvas[static_cast<std::size_t>(top + r) * canvas_size + left + c] =
          patch[static_cast<std::size_t>(r) * patch_size + c];
}

// Top-left corner of a glyph centred inside cell `cell` of a rows x cols grid.
std::pair<int, int> cell_origin(int cell, int rows, int cols, int canvas_size, int glyph_size) {
  const int pitch_y = canvas_size / rows, pitch_x = canvas_size / cols;
  const int r = cell / cols, c = cell % cols;
  return {r * pitch_y + (pitch_y - glyph_size) / 2, c * pitch_x + (pitch_x - glyph_size) / 2};
}

}  // namespace

Dataset generate_grid_positions(const GridSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset ds;
  ds.height = ds.width = spec.canvas_size;
  ds.channels = 1;
  ds.num_categories = spec.num_categories;
  ds.num_conditions = spec.num_conditions;
  ds.provenance = Provenance::Procedural;
  const auto cells = spec.condition_cells();
  const std::size_t npix = static_cast<std::size_t>(spec.canvas_size) * spec.canvas_size;
  ds.items.reserve(static_cast<std::size_t>(spec.num_categories) * spec.num_conditions *
                   spec.samples_per_combination);

  for (int c = 0; c < spec.num_categories; ++c) {
    for (int n = 0; n < spec.num_conditions; ++n) {
      for (int s = 0; s < spec.samples_per_combination; ++s) {
        const std::uint64_t item_seed = hash64(
            {seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(n),
             static_cast<std::uint64_t>(s)});
        const auto glyph = render_glyph(c, item_seed, spec.glyph_size, spec.num_categories);
        std::vector<double> canvas(npix, 0.0);
        const auto [top, left] =
            cell_origin(cells[n], spec.rows, spec.cols, spec.canvas_size, spec.glyph_size);
        paste(canvas, spec.canvas_size, glyph, spec.glyph_size, top, left);

        LabeledImage img;
        img.category = c;
        img.condition = n;
        img.pixels.resize(npix);
        Rng noise(splitmix64(item_seed));
        for (std::size_t i = 0; i < npix; ++i) {
          double v = canvas[i];
          if (spec.noise_std > 0) v += spec.noise_std * noise.normal();
          img.pixels[i] = byte_to_pixel(pixel_to_byte(v));
        }
        ds.items.push_back(std::move(img));
      }
    }
  }
  return ds;
}

// ---- IDX ---------------------------------------------------------------------

namespace {

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void put_be32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace

IdxArray read_idx(const fs::path& path, int expected_rank) {
  const std::string bytes = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::string where = "IDX file " + path.string();
  require(bytes.size() >= 4, ErrorKind::Format, where + ": truncated header");
  require(p[0] == 0 && p[1] == 0, ErrorKind::Format, where + ": bad magic (leading bytes)");
  require(p[2] == 0x08, ErrorKind::Format,
          where + ": unsupported element type 0x" + [&] {
            std::ostringstream s;
            s << std::hex << int(p[2]);
            return s.str();
          }());
  const int rank = p[3];
  if (expected_rank >= 0)
    require(rank == expected_rank, ErrorKind::Format,
            where + ": rank " + std::to_string(rank) + " where rank " +
                std::to_string(expected_rank) + " expected");
  require(bytes.size() >= 4 + 4 * static_cast<std::size_t>(rank), ErrorKind::Format,
          where + ": truncated dimensions");
  IdxArray out;
  std::size_t total = 1;
  for (int i = 0; i < rank; ++i) {
    out.dims.push_back(read_be32(p + 4 + 4 * i));
    total *= out.dims.back();
  }
  const std::size_t offset = 4 + 4 * static_cast<std::size_t>(rank);
  require(bytes.size() - offset == total, ErrorKind::Format,
          where + ": payload has " + std::to_string(bytes.size() - offset) + " bytes, header implies " +
              std::to_string(total));
  out.data.assign(p + offset, p + bytes.size());
  return out;
}

void write_idx(const fs::path& path, const IdxArray& array) {
  require(array.dims.size() <= 255, ErrorKind::InvalidArgument, "IDX rank exceeds 255");
  std::size_t total = 1;
  for (auto d : array.dims) total *= d;
  require(total == array.data.size(), ErrorKind::InvalidArgument,
          "IDX payload does not match dimensions");
  std::string out;
  out.reserve(4 + 4 * array.dims.size() + array.data.size());
  out.push_back(0);
  out.push_back(0);
  out.push_back(0x08);
  out.push_back(static_cast<char>(array.dims.size()));
  for (auto d : array.dims) put_be32(out, d);
  out.append(reinterpret_cast<const char*>(array.data.data()), array.data.size());
  write_file(path, out);
}

std::vector<IdxRecord> load_idx(const fs::path& images_path, const fs::path& labels_path) {
  const IdxArray images = read_idx(images_path, 3);
  const IdxArray labels = read_idx(labels_path, 1);
  require(images.dims[0] == labels.dims[0], ErrorKind::Consistency,
          "image file " + images_path.string() + " has " + std::to_string(images.dims[0]) +
              " records but label file " + labels_path.string() + " has " +
              std::to_string(labels.dims[0]));
  const int rows = static_cast<int>(images.dims[1]), cols = static_cast<int>(images.dims[2]);
  const std::size_t per = static_cast<std::size_t>(rows) * cols;
  std::vector<IdxRecord> out(images.dims[0]);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].rows = rows;
    out[i].cols = cols;
    out[i].label = labels.data[i];
    out[i].pixels.resize(per);
    for (std::size_t k = 0; k < per; ++k) out[i].pixels[k] = byte_to_pixel(images.data[i * per + k]);
  }
  return out;
}

void save_idx(const fs::path& images_path, const fs::path& labels_path,
              const std::vector<IdxRecord>& records) {
  IdxArray images, labels;
  const int rows = records.empty() ? 0 : records[0].rows;
  const int cols = records.empty() ? 0 : records[0].cols;
  images.dims = {static_cast<std::uint32_t>(records.size()), static_cast<std::uint32_t>(rows),
                 static_cast<std::uint32_t>(cols)};
  labels.dims = {static_cast<std::uint32_t>(records.size())};
  for (const auto& r : records) {
    require(r.rows == rows && r.cols == cols, ErrorKind::InvalidArgument,
            "IDX records must share one image size");
    require(r.label >= 0 && r.label <= 255, ErrorKind::InvalidArgument, "label exceeds one byte");
    for (float p : r.pixels) images.data.push_back(pixel_to_byte(p));
    labels.data.push_back(static_cast<std::uint8_t>(r.label));
  }
  write_idx(images_path, images);
  write_idx(labels_path, labels);
}

std::vector<float> resize_bilinear(const std::vector<float>& src, int src_rows, int src_cols,
                                   int dst_rows, int dst_cols) {
  require(src.size() == static_cast<std::size_t>(src_rows) * src_cols, ErrorKind::Shape,
          "resize source size mismatch");
  std::vector<float> dst(static_cast<std::size_t>(dst_rows) * dst_cols);
  const double sy = static_cast<double>(src_rows) / dst_rows;
  const double sx = static_cast<double>(src_cols) / dst_cols;
  for (int r = 0; r < dst_rows; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, src_rows - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src_rows - 1);
    const double wy = fy - y0;
    for (int c = 0; c < dst_cols; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, src_cols - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src_cols - 1);
      const double wx = fx - x0;
      auto at = [&](int y, int x) { return static_cast<double>(src[static_cast<std::size_t>(y) * src_cols + x]); };
      const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                       wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
      dst[static_cast<std::size_t>(r) * dst_cols + c] = static_cast<float>(v);
    }
  }
  return dst;
}

Dataset build_positions_dataset(const std::vector<IdxRecord>& base, int rows, int cols,
                                int glyph_size, int canvas_size, int classes_kept) {
  require(!base.empty(), ErrorKind::InvalidArgument, "base image list is empty");
  GridSpec grid;
  grid.rows = rows;
  grid.cols = cols;
  grid.num_conditions = rows * cols;
  grid.glyph_size = glyph_size;
  grid.canvas_size = canvas_size;
  grid.num_categories = std::max(1, classes_kept);
  grid.validate();

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < base.size(); ++i) by_class[base[i].label].push_back(i);
  require(classes_kept >= 1 && classes_kept <= static_cast<int>(by_class.size()),
          ErrorKind::InvalidArgument,
          "classes_kept=" + std::to_string(classes_kept) + " but base has " +
              std::to_string(by_class.size()) + " distinct classes");

  // Lowest class ids are kept; category = rank among kept classes.
  std::vector<std::vector<std::size_t>> kept;
  for (auto& [label, idx] : by_class) {
    if (static_cast<int>(kept.size()) == classes_kept) break;
    kept.push_back(idx);
  }
  std::size_t per_class = kept[0].size();
  for (const auto& k : kept) per_class = std::min(per_class, k.size());

  Dataset ds;
  ds.height = ds.width = canvas_size;
  ds.channels = 1;
  ds.num_categories = classes_kept;
  ds.num_conditions = rows * cols;
  ds.provenance = Provenance::IdxIngested;
  const std::size_t npix = static_cast<std::size_t>(canvas_size) * canvas_size;
  for (int c = 0; c < classes_kept; ++c) {
    for (std::size_t j = 0; j < per_class; ++j) {
      const auto& rec = base[kept[c][j]];
      const int position = static_cast<int>((j + static_cast<std::size_t>(c)) % ds.num_conditions);
      const auto glyph = resize_bilinear(rec.pixels, rec.rows, rec.cols, glyph_size, glyph_size);
      std::vector<double> canvas(npix, 0.0);
      const auto [top, left] = cell_origin(position, rows, cols, canvas_size, glyph_size);
      paste(canvas, canvas_size, glyph, glyph_size, top, left);
      LabeledImage img;
      img.category = c;
      img.condition = position;
      img.pixels.resize(npix);
      for (std::size_t k = 0; k < npix; ++k) img.pixels[k] = byte_to_pixel(pixel_to_byte(canvas[k]));
      ds.items.push_back(std::move(img));
    }
  }
  return ds;
}

// ---- dataset directories -------------------------------------------------------

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  dataset.validate();
  require(dataset.channels == 1, ErrorKind::InvalidArgument,
          "only single-channel datasets can be stored as rank-3 IDX");
  fs::create_directories(dir);
  IdxArray images;
  images.dims = {static_cast<std::uint32_t>(dataset.size()),
                 static_cast<std::uint32_t>(dataset.height),
                 static_cast<std::uint32_t>(dataset.width)};
  images.data.reserve(dataset.size() * dataset.image_size());
  std::string manifest;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& it = dataset.items[i];
    for (float p : it.pixels) images.data.push_back(pixel_to_byte(p));
    manifest += "{\"i\":" + std::to_string(i) + ",\"c\":" + std::to_string(it.category) +
                ",\"n\":" + std::to_string(it.condition) + "}\n";
  }
  write_idx(dir / "images.idx", images);
  write_file(dir / "manifest.jsonl", manifest);
  nlohmann::json meta = {{"num_categories", dataset.num_categories},
                         {"num_conditions", dataset.num_conditions},
                         {"height", dataset.height},
                         {"width", dataset.width},
                         {"channels", dataset.channels},
                         {"provenance", to_string(dataset.provenance)}};
  write_file(dir / "dataset.json", meta.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(dir / "dataset.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, (dir / "dataset.json").string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.num_categories = meta.at("num_categories").get<int>();
    ds.num_conditions = meta.at("num_conditions").get<int>();
    ds.height = meta.at("height").get<int>();
    ds.width = meta.at("width").get<int>();
    ds.channels = meta.at("channels").get<int>();
    ds.provenance = provenance_from_string(meta.at("provenance").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, (dir / "dataset.json").string() + ": " + e.what());
  }

  const IdxArray images = read_idx(dir / "images.idx", 3);
  require(static_cast<int>(images.dims[1]) == ds.height &&
              static_cast<int>(images.dims[2]) == ds.width,
          ErrorKind::Consistency, "images.idx dimensions disagree with dataset.json");

  std::istringstream manifest(read_file(dir / "manifest.jsonl"));
  std::string line;
  std::vector<std::pair<int, int>> labels;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      require(j.at("i").get<std::size_t>() == labels.size(), ErrorKind::Consistency,
              "manifest line " + std::to_string(labels.size()) + " has out-of-order index");
      labels.emplace_back(j.at("c").get<int>(), j.at("n").get<int>());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Format, "manifest line " + std::to_string(labels.size()) + ": " + e.what());
    }
  }
  require(labels.size() == images.dims[0], ErrorKind::Consistency,
          "manifest lists " + std::to_string(labels.size()) + " items but images.idx holds " +
              std::to_string(images.dims[0]));

  const std::size_t per = ds.image_size();
  ds.items.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& it = ds.items[i];
    it.category = labels[i].first;
    it.condition = labels[i].second;
    it.pixels.resize(per);
    for (std::size_t k = 0; k < per; ++k) it.pixels[k] = byte_to_pixel(images.data[i * per + k]);
  }
  ds.validate();
  return ds;
}

}  // namespace oodb
