#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace oodb {

// Layout of a procedural "grid positions" dataset: one glyph per image, placed
// in the grid cell selected by the item's condition.
struct GridSpec {
  int num_categories = 9;
  int num_conditions = 9;
  int rows = 3;
  int cols = 3;
  // Row-major cell index used by each condition. Empty means every cell of the
  // rows x cols grid in order, which requires num_conditions == rows * cols.
  std::vector<int> cells;
  int glyph_size = 14;
  int canvas_size = 42;
  int samples_per_combination = 20;
  double noise_std = 0.05;

  void validate() const;
  std::vector<int> condition_cells() const;
};

struct LabeledImage {
  std::vector<float> pixels;  // height * width * channels, row-major
  int category = 0;
  int condition = 0;

  friend bool operator==(const LabeledImage&, const LabeledImage&) = default;
};

enum class Provenance { Procedural, IdxIngested };

const char* to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct Dataset {
  int height = 0;
  int width = 0;
  int channels = 1;
  int num_categories = 0;
  int num_conditions = 0;
  Provenance provenance = Provenance::Procedural;
  std::vector<LabeledImage> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  std::size_t image_size() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  // Copy with the same metadata and no items.
  Dataset empty_like() const;
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Pixels are stored as 8-bit intensities; every image pixel is k/255.
inline float byte_to_pixel(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }
std::uint8_t pixel_to_byte(double p);

// A square glyph patch in [0,1]. Deterministic in (category, style_seed).
std::vector<float> render_glyph(int category, std::uint64_t style_seed, int glyph_size,
                                int num_categories);

Dataset generate_grid_positions(const GridSpec& spec, std::uint64_t seed);

// ---- IDX files -------------------------------------------------------------

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  friend bool operator==(const IdxArray&, const IdxArray&) = default;
};

// Reads an unsigned-byte IDX file. expected_rank < 0 accepts any rank.
IdxArray read_idx(const std::filesystem::path& path, int expected_rank = -1);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

struct IdxRecord {
  int rows = 0;
  int cols = 0;
  std::vector<float> pixels;  // rows * cols, in [0,1]
  int label = 0;
};

std::vector<IdxRecord> load_idx(const std::filesystem::path& images_path,
                                 const std::filesystem::path& labels_path);
void save_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
              const std::vector<IdxRecord>& records);

// Bilinear resampling with half-pixel centers.
std::vector<float> resize_bilinear(const std::vector<float>& src, int src_rows, int src_cols,
                                   int dst_rows, int dst_cols);

// Builds a positions dataset from labelled base images: each image is resized
// to glyph_size and pasted into one grid cell. Classes are truncated to the
// smallest kept class so every (category, position) count differs by at most 1.
Dataset build_positions_dataset(const std::vector<IdxRecord>& base, int rows, int cols,
                                int glyph_size, int canvas_size, int classes_kept);

// images.idx (rank 3), manifest.jsonl, dataset.json
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace oodb
