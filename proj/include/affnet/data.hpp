#pragma once

// Data pipeline: point annotations → Gaussian heatmaps, a deterministic
// synthetic paired-scene generator (an object glyph rendered with and
// without a stick figure interacting with it), annotation/image file
// formats, and train/val/test split manifests.

#include <filesystem>
#include <functional>
#include <map>
#include <set>

#include "affnet/model.hpp"

namespace affnet {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

inline const std::array<std::string, kNumParts>& part_names() {
  static const std::array<std::string, kNumParts> names = {
      "hand", "feet", "mouth", "hips", "back", "eye", "outside"};
  return names;
}

inline int part_index(const std::string& name) {
  const auto& names = part_names();
  for (int i = 0; i < kNumParts; ++i)
    if (names[i] == name) return i;
  return -1;
}

struct AffordanceClass {
  std::string name;
  std::vector<int> parts;  // active part indices
};

// Each class touches a distinct subset of body parts; together the classes
// cover all seven parts.
inline const std::vector<AffordanceClass>& affordance_vocabulary() {
  static const std::vector<AffordanceClass> vocab = {
      {"grasp", {0}},        // hand
      {"kick", {1}},         // feet
      {"bite", {2}},         // mouth
      {"sit", {3}},          // hips
      {"lean", {4}},         // back
      {"watch", {5}},        // eye
      {"swing", {0, 6}},     // hand + a locus outside the object
  };
  return vocab;
}

inline const AffordanceClass& affordance_class(const std::string& name) {
  for (const auto& a : affordance_vocabulary())
    if (a.name == name) return a;
  throw ConfigError("unknown affordance class: " + name);
}

inline const std::vector<std::string>& object_vocabulary() {
  static const std::vector<std::string> vocab = {"box",  "ball",  "bar",
                                                 "ring", "wedge", "cup"};
  return vocab;
}

// ---------------------------------------------------------------------------
// Annotations and heatmaps
// ---------------------------------------------------------------------------

struct AnnotationRecord {
  std::string image_id;
  std::string affordance_label;
  std::string object_label;
  int width = 0, height = 0;
  std::array<int, 4> object_box{0, 0, 0, 0};  // x, y, w, h
  std::array<PointList, kNumParts> points;
};

// Kernel size from the image diagonal: diag/3 rounded down to odd, never
// below 3.
inline int gaussian_kernel_size(int h, int w) {
  const double diag =
      std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w);
  int ks = static_cast<int>(std::floor(diag / 3.0));
  if (ks % 2 == 0) --ks;
  return std::max(ks, 3);
}

// Unit impulses at the annotated points, blurred by a separable Gaussian
// (sigma = ks/6, zero padding) and min-max normalized so a nonempty point
// set always peaks at exactly 1.
inline Tensor points_to_heatmap(const PointList& points, int h, int w) {
  if (h < 1 || w < 1)
    throw ShapeError("points_to_heatmap: image must be at least 1x1");
  std::vector<double> mask(static_cast<size_t>(h) * w, 0.0);
  for (const auto& p : points) {
    if (p[0] < 0 || p[0] >= w || p[1] < 0 || p[1] >= h)
      throw DataError("annotation point (" + std::to_string(p[0]) + "," +
                      std::to_string(p[1]) + ") outside " + std::to_string(w) +
                      "x" + std::to_string(h) + " image");
    mask[static_cast<size_t>(p[1]) * w + p[0]] = 1.0;
  }
  if (points.empty()) return Tensor::from({h, w}, std::move(mask));

  const int ks = gaussian_kernel_size(h, w);
  const int r = ks / 2;
  const double sigma = ks / 6.0;
  std::vector<double> kernel(ks);
  for (int i = 0; i < ks; ++i) {
    const double d = i - r;
    kernel[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }

  std::vector<double> rows(mask.size(), 0.0), out(mask.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < w)
          acc += kernel[i + r] * mask[static_cast<size_t>(y) * w + xx];
      }
      rows[static_cast<size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < h)
          acc += kernel[i + r] * rows[static_cast<size_t>(yy) * w + x];
      }
      out[static_cast<size_t>(y) * w + x] = acc;
    }

  double lo = out[0], hi = out[0];
  for (double v : out) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi > lo) {
    for (double& v : out) v = (v - lo) / (hi - lo);
  } else if (hi > 0.0) {
    std::fill(out.begin(), out.end(), 1.0);
  }
  return Tensor::from({h, w}, std::move(out));
}

// All seven part channels for one record; errors name the record.
inline Tensor record_heatmaps(const AnnotationRecord& rec) {
  std::vector<double> v;
  v.reserve(static_cast<size_t>(kNumParts) * rec.height * rec.width);
  for (int j = 0; j < kNumParts; ++j) {
    Tensor ch;
    try {
      ch = points_to_heatmap(rec.points[j], rec.height, rec.width);
    } catch (const DataError& e) {
      throw DataError("record " + rec.image_id + ": " + e.what());
    }
    v.insert(v.end(), ch.values().begin(), ch.values().end());
  }
  return Tensor::from({kNumParts, rec.height, rec.width}, std::move(v));
}

// ---------------------------------------------------------------------------
// Annotation JSON
// ---------------------------------------------------------------------------

inline nlohmann::json record_to_json(const AnnotationRecord& rec) {
  nlohmann::json pts = nlohmann::json::object();
  for (int j = 0; j < kNumParts; ++j) {
    if (rec.points[j].empty()) continue;
    nlohmann::json list = nlohmann::json::array();
    for (const auto& p : rec.points[j]) list.push_back({p[0], p[1]});
    pts[part_names()[j]] = std::move(list);
  }
  return nlohmann::json{{"image_id", rec.image_id},
                        {"affordance", rec.affordance_label},
                        {"object", rec.object_label},
                        {"width", rec.width},
                        {"height", rec.height},
                        {"object_box", rec.object_box},
                        {"points", std::move(pts)}};
}

inline AnnotationRecord record_from_json(const nlohmann::json& j) {
  AnnotationRecord rec;
  try {
    rec.image_id = j.at("image_id").get<std::string>();
    rec.affordance_label = j.at("affordance").get<std::string>();
    rec.object_label = j.at("object").get<std::string>();
    rec.width = j.at("width").get<int>();
    rec.height = j.at("height").get<int>();
    const auto& box = j.at("object_box");
    for (int i = 0; i < 4; ++i) rec.object_box[i] = box.at(i).get<int>();
    for (const auto& [key, list] : j.at("points").items()) {
      const int idx = part_index(key);
      if (idx < 0)
        throw DataError("record " + rec.image_id + ": unknown part \"" + key +
                        "\"");
      for (const auto& p : list) {
        const int x = p.at(0).get<int>(), y = p.at(1).get<int>();
        if (x < 0 || x >= rec.width || y < 0 || y >= rec.height)
          throw DataError("record " + rec.image_id + ": point (" +
                          std::to_string(x) + "," + std::to_string(y) +
                          ") outside " + std::to_string(rec.width) + "x" +
                          std::to_string(rec.height));
        rec.points[idx].push_back({x, y});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("annotation record: ") + e.what());
  }
  bool known = false;
  for (const auto& a : affordance_vocabulary())
    known = known || a.name == rec.affordance_label;
  if (!known)
    throw DataError("record " + rec.image_id + ": unknown affordance \"" +
                    rec.affordance_label + "\"");
  return rec;
}

inline std::vector<AnnotationRecord> load_annotations(
    const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("annotations " + path.string() + ": parse error at byte " +
                    std::to_string(e.byte) + ": " + e.what());
  }
  if (!j.is_array())
    throw DataError("annotations " + path.string() + ": expected an array");
  std::vector<AnnotationRecord> records;
  for (const auto& item : j) records.push_back(record_from_json(item));
  return records;
}

inline void save_annotations(const std::filesystem::path& path,
                             const std::vector<AnnotationRecord>& records) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : records) j.push_back(record_to_json(r));
  atomic_write_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// PPM images (binary P6, 8-bit)
// ---------------------------------------------------------------------------

inline void write_ppm(const Tensor& img, const std::filesystem::path& path) {
  if (img.shape().size() != 3 || img.shape()[0] != 3)
    throw ShapeError("write_ppm: want [3,h,w], got " + shape_str(img.shape()));
  const int h = img.shape()[1], w = img.shape()[2];
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) +
                      "\n255\n";
  bytes.reserve(bytes.size() + static_cast<size_t>(3) * h * w);
  const auto& v = img.values();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const double raw = v[(static_cast<size_t>(ch) * h + y) * w + x];
        const double clamped = std::min(1.0, std::max(0.0, raw));
        bytes.push_back(
            static_cast<char>(static_cast<int>(std::lround(clamped * 255.0))));
      }
  atomic_write_file(path, bytes);
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  size_t pos = 0;
  auto fail = [&](const std::string& what) -> DataError {
    return DataError("image " + path.string() + ": " + what + " at byte " +
                     std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> int {
    skip_space();
    if (pos >= bytes.size() ||
        !std::isdigit(static_cast<unsigned char>(bytes[pos])))
      throw fail("expected integer");
    long long n = 0;
    while (pos < bytes.size() &&
           std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      n = n * 10 + (bytes[pos] - '0');
      if (n > 1 << 20) throw fail("integer out of range");
      ++pos;
    }
    return static_cast<int>(n);
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw fail("not a binary PPM (P6) file");
  pos = 2;
  const int w = read_int(), h = read_int(), maxval = read_int();
  if (w < 1 || h < 1) throw fail("invalid dimensions");
  if (maxval != 255) throw fail("only 8-bit images supported");
  if (pos >= bytes.size() ||
      !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw fail("expected whitespace before pixel data");
  ++pos;
  const size_t need = static_cast<size_t>(3) * h * w;
  if (bytes.size() - pos < need) {
    pos = bytes.size();
    throw fail("truncated pixel data");
  }
  std::vector<double> v(need);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        v[(static_cast<size_t>(ch) * h + y) * w + x] =
            static_cast<unsigned char>(bytes[pos + (static_cast<size_t>(y) * w +
                                                    x) *
                                                       3 +
                                             ch]) /
            255.0;
  return Tensor::from({3, h, w}, std::move(v));
}

// ---------------------------------------------------------------------------
// Synthetic paired scenes
// ---------------------------------------------------------------------------

namespace detail {

struct Canvas {
  int size;
  std::vector<double> pix;  // [3,size,size]
  // Optional per-pixel tint applied while painting; used to shade glyphs so
  // their surface is not one flat color.
  std::function<std::array<double, 3>(int, int)> shade;
  Canvas(int s, const std::array<double, 3>& bg) : size(s) {
    pix.resize(static_cast<size_t>(3) * s * s);
    for (int ch = 0; ch < 3; ++ch)
      std::fill_n(pix.begin() + static_cast<size_t>(ch) * s * s, s * s, bg[ch]);
  }
  void set(int x, int y, const std::array<double, 3>& rgb) {
    if (x < 0 || y < 0 || x >= size || y >= size) return;
    std::array<double, 3> tint = {1.0, 1.0, 1.0};
    if (shade) tint = shade(x, y);
    for (int ch = 0; ch < 3; ++ch)
      pix[(static_cast<size_t>(ch) * size + y) * size + x] = rgb[ch] * tint[ch];
  }
  void fill_rect(int x0, int y0, int x1, int y1,
                 const std::array<double, 3>& rgb) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, rgb);
  }
  void fill_circle(int cx, int cy, int r, const std::array<double, 3>& rgb) {
    for (int y = cy - r; y <= cy + r; ++y)
      for (int x = cx - r; x <= cx + r; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) set(x, y, rgb);
  }
  // 2px-thick segment: a radius-1 disk stamped along the line.
  void draw_line(int x0, int y0, int x1, int y1,
                 const std::array<double, 3>& rgb) {
    const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
      const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (dx * dx + dy * dy <= 1) set(x + dx, y + dy, rgb);
    }
  }
};

inline void render_glyph(Canvas& canvas, const std::string& kind,
                         const std::array<int, 4>& box,
                         const std::array<double, 3>& rgb) {
  const int x0 = box[0], y0 = box[1], bw = box[2], bh = box[3];
  const int x1 = x0 + bw - 1, y1 = y0 + bh - 1;
  // Shade the surface with smooth per-channel ramps (as if lit from a corner)
  // so different spots on the same object look different.
  canvas.shade = [x0, y0, bw, bh](int px, int py) -> std::array<double, 3> {
    const double u = bw > 1 ? static_cast<double>(px - x0) / (bw - 1) : 0.5;
    const double v = bh > 1 ? static_cast<double>(py - y0) / (bh - 1) : 0.5;
    return {0.55 + 0.45 * u, 0.75 + 0.25 * (1.0 - 0.5 * (u + v)),
            0.55 + 0.45 * v};
  };
  const int cx = x0 + bw / 2, cy = y0 + bh / 2;
  const int r = std::min(bw, bh) / 2;
  if (kind == "box") {
    canvas.fill_rect(x0, y0, x1, y1, rgb);
  } else if (kind == "ball") {
    canvas.fill_circle(cx, cy, r, rgb);
  } else if (kind == "bar") {
    canvas.fill_rect(x0, cy - std::max(1, bh / 6), x1, cy + std::max(1, bh / 6),
                     rgb);
  } else if (kind == "ring") {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const int d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        if (d2 <= r * r && d2 >= (r / 2) * (r / 2)) canvas.set(x, y, rgb);
      }
  } else if (kind == "wedge") {
    for (int y = y0; y <= y1; ++y) {
      const double t = bh > 1 ? static_cast<double>(y - y0) / (bh - 1) : 1.0;
      const int half = static_cast<int>(std::lround(t * (bw / 2)));
      canvas.fill_rect(cx - half, y, cx + half, y, rgb);
    }
  } else if (kind == "cup") {
    const int wall = std::max(1, bw / 5);
    canvas.fill_rect(x0, y0, x0 + wall, y1, rgb);
    canvas.fill_rect(x1 - wall, y0, x1, y1, rgb);
    canvas.fill_rect(x0, y1 - wall, x1, y1, rgb);
  } else {
    canvas.shade = nullptr;
    throw ConfigError("unknown object glyph: " + kind);
  }
  canvas.shade = nullptr;
}

// Class-specific contact locus, relative to the object's box. The "outside"
// part deliberately lands above (or below) the box, still inside the image.
inline std::array<int, 2> contact_locus(int part, const std::array<int, 4>& box,
                                        int image_size) {
  const int x0 = box[0], y0 = box[1], bw = box[2], bh = box[3];
  const int cx = x0 + bw / 2, cy = y0 + bh / 2;
  switch (part) {
    case 0: return {cx, y0 + 2};                  // hand: top edge
    case 1: return {x0 + 2, y0 + bh - 3};         // feet: bottom corner
    case 2: return {cx, cy};                      // mouth: center
    case 3: return {cx, y0 + 2};                  // hips: top surface
    case 4: return {x0 + bw - 3, cy};             // back: side edge
    case 5: return {cx, cy};                      // eye: gaze target
    default: {                                    // outside: off the box
      const int above = y0 - bh / 2;
      if (above >= 1) return {cx, above};
      return {cx, std::min(image_size - 2, y0 + bh + bh / 2)};
    }
  }
}

constexpr int kBaseJoints = 16;

// Bones over the 16 base joints: pelvis(0) spine(1) neck(2) head(3),
// left arm 4-5-6, right arm 7-8-9, left leg 10-11-12, right leg 13-14-15.
inline const std::array<std::array<int, 2>, 15>& skeleton_bones() {
  static const std::array<std::array<int, 2>, 15> bones = {{{0, 1},
                                                            {1, 2},
                                                            {2, 3},
                                                            {2, 4},
                                                            {4, 5},
                                                            {5, 6},
                                                            {2, 7},
                                                            {7, 8},
                                                            {8, 9},
                                                            {0, 10},
                                                            {10, 11},
                                                            {11, 12},
                                                            {0, 13},
                                                            {13, 14},
                                                            {14, 15}}};
  return bones;
}

// The joint that must land on the contact locus, per part.
inline int effector_joint(int part) {
  switch (part) {
    case 0: return 9;   // hand → right wrist
    case 1: return 15;  // feet → right ankle
    case 2: return 3;   // mouth → head
    case 3: return 0;   // hips → pelvis
    case 4: return 1;   // back → spine
    case 5: return 3;   // eye → head
    default: return 9;  // outside rides along with the hand
  }
}

}  // namespace detail

struct GeneratedPair {
  SamplePair sample;
  AnnotationRecord record_in, record_non;
};

// Deterministic synthetic scene pair for one affordance class: the same
// object glyph in both images, a stick figure touching the class's contact
// loci in the interactive one, ground truth from the contact points.
inline GeneratedPair generate_synthetic_pair(uint64_t seed,
                                             const std::string& affordance,
                                             int size = 224) {
  const AffordanceClass& cls = affordance_class(affordance);
  if (size < 32) throw ConfigError("generate_synthetic_pair: size must be >= 32");
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);

  GeneratedPair out;
  out.sample.id = "pair_" + std::to_string(seed);
  out.sample.affordance_label = affordance;
  const std::string object =
      object_vocabulary()[rng.next_u64() % object_vocabulary().size()];
  out.sample.object_label = object;

  const std::array<double, 3> object_rgb = {rng.uniform(0.1, 0.6),
                                            rng.uniform(0.1, 0.6),
                                            rng.uniform(0.1, 0.6)};
  const std::array<double, 3> figure_rgb = {rng.uniform(0.0, 0.25),
                                            rng.uniform(0.0, 0.25),
                                            rng.uniform(0.0, 0.25)};

  auto sample_box = [&]() -> std::array<int, 4> {
    const int bw = static_cast<int>(rng.uniform(size / 5.0, size / 3.0));
    const int bh = static_cast<int>(rng.uniform(size / 5.0, size / 3.0));
    const int margin = size / 4;
    const int x = static_cast<int>(
        rng.uniform(static_cast<double>(margin), size - margin - bw - 1.0));
    const int y = static_cast<int>(
        rng.uniform(static_cast<double>(margin), size - margin - bh - 1.0));
    return {x, y, bw, bh};
  };
  const std::array<int, 4> box_in = sample_box();
  const std::array<int, 4> box_non = sample_box();

  // Per-point scatter around each contact locus, proportional to the image
  // like every other scene dimension; mimics the spread of repeated
  // annotations of the same part.
  const double jitter = size / 12.0;
  auto scene_points = [&](const std::array<int, 4>& box) {
    std::array<PointList, kNumParts> pts;
    for (int part : cls.parts) {
      const auto locus = detail::contact_locus(part, box, size);
      for (int k = 0; k < 3; ++k) {
        int x = locus[0] + static_cast<int>(rng.uniform(-jitter, jitter));
        int y = locus[1] + static_cast<int>(rng.uniform(-jitter, jitter));
        if (part != 6) {  // contact parts stay inside the object's box
          x = std::min(box[0] + box[2] - 1, std::max(box[0], x));
          y = std::min(box[1] + box[3] - 1, std::max(box[1], y));
        } else {  // the outside part stays off the box but on the image
          x = std::min(size - 1, std::max(0, x));
          if (locus[1] < box[1])  // locus above the box: keep it there
            y = std::min(box[1] - 1, std::max(0, y));
          else  // locus below the box
            y = std::max(box[1] + box[3], std::min(size - 1, y));
        }
        pts[part].push_back({x, y});
      }
    }
    return pts;
  };
  auto points_in = scene_points(box_in);
  auto points_non = scene_points(box_non);

  // Stick figure: canonical limbs with small random articulation, then the
  // whole figure translated so the class effector lands on the first locus.
  const double s = size / 3.0;
  std::array<std::array<double, 2>, detail::kBaseJoints> joints = {{
      {0.0, 0.0},          // pelvis
      {0.0, -0.20 * s},    // spine
      {0.0, -0.40 * s},    // neck
      {0.0, -0.50 * s},    // head
      {-0.12 * s, -0.38 * s},
      {-0.20 * s, -0.24 * s},
      {-0.26 * s, -0.10 * s},
      {0.12 * s, -0.38 * s},
      {0.20 * s, -0.24 * s},
      {0.26 * s, -0.10 * s},
      {-0.08 * s, 0.0},
      {-0.10 * s, 0.25 * s},
      {-0.12 * s, 0.50 * s},
      {0.08 * s, 0.0},
      {0.10 * s, 0.25 * s},
      {0.12 * s, 0.50 * s},
  }};
  for (int j : {5, 6, 8, 9, 11, 12, 14, 15}) {  // articulate elbows/knees on
    joints[j][0] += rng.uniform(-0.05, 0.05) * s;
    joints[j][1] += rng.uniform(-0.05, 0.05) * s;
  }
  const int effector = detail::effector_joint(cls.parts[0]);
  const auto anchor = detail::contact_locus(cls.parts[0], box_in, size);
  const double dx = anchor[0] - joints[effector][0];
  const double dy = anchor[1] - joints[effector][1];
  for (auto& j : joints) {
    j[0] = std::min(size - 2.0, std::max(1.0, j[0] + dx));
    j[1] = std::min(size - 2.0, std::max(1.0, j[1] + dy));
  }

  // 53 joints: 16 base + 37 interpolated along the 15 bones.
  std::vector<std::array<double, 2>> all_joints(joints.begin(), joints.end());
  const auto& bones = detail::skeleton_bones();
  for (int k = 0; k < kPoseJoints - detail::kBaseJoints; ++k) {
    const auto& b = bones[k % bones.size()];
    const double t = k < 15 ? 1.0 / 3.0 : (k < 30 ? 2.0 / 3.0 : 0.5);
    all_joints.push_back(
        {joints[b[0]][0] + t * (joints[b[1]][0] - joints[b[0]][0]),
         joints[b[0]][1] + t * (joints[b[1]][1] - joints[b[0]][1])});
  }
  std::vector<double> pose;
  pose.reserve(kPoseJoints * 3);
  for (const auto& j : all_joints) {
    pose.push_back(j[0] / size);
    pose.push_back(j[1] / size);
    pose.push_back(1.0);
  }
  out.sample.pose = Tensor::from({kPoseJoints, 3}, std::move(pose));

  // Render both scenes on lightly noised backgrounds.
  const std::array<double, 3> bg = {rng.uniform(0.75, 0.95),
                                    rng.uniform(0.75, 0.95),
                                    rng.uniform(0.75, 0.95)};
  detail::Canvas canvas_in(size, bg), canvas_non(size, bg);
  detail::render_glyph(canvas_in, object, box_in, object_rgb);
  detail::render_glyph(canvas_non, object, box_non, object_rgb);
  for (const auto& b : bones)
    canvas_in.draw_line(static_cast<int>(std::lround(joints[b[0]][0])),
                        static_cast<int>(std::lround(joints[b[0]][1])),
                        static_cast<int>(std::lround(joints[b[1]][0])),
                        static_cast<int>(std::lround(joints[b[1]][1])),
                        figure_rgb);
  for (auto& v : canvas_in.pix)
    v = std::min(1.0, std::max(0.0, v + rng.uniform(-0.02, 0.02)));
  for (auto& v : canvas_non.pix)
    v = std::min(1.0, std::max(0.0, v + rng.uniform(-0.02, 0.02)));
  out.sample.image_in = Tensor::from({3, size, size}, std::move(canvas_in.pix));
  out.sample.image_non =
      Tensor::from({3, size, size}, std::move(canvas_non.pix));

  auto fill_record = [&](AnnotationRecord& rec, const std::string& suffix,
                         const std::array<int, 4>& box,
                         const std::array<PointList, kNumParts>& pts) {
    rec.image_id = out.sample.id + suffix;
    rec.affordance_label = affordance;
    rec.object_label = object;
    rec.width = rec.height = size;
    rec.object_box = box;
    rec.points = pts;
  };
  fill_record(out.record_in, "_in", box_in, points_in);
  fill_record(out.record_non, "_non", box_non, points_non);

  out.sample.gt_in = record_heatmaps(out.record_in);
  out.sample.gt_non = record_heatmaps(out.record_non);
  out.sample.fixations_in = points_in;
  out.sample.fixations_non = points_non;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------

inline void write_dataset(const std::filesystem::path& dir,
                          const std::vector<GeneratedPair>& pairs) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "poses");
  std::vector<AnnotationRecord> records;
  for (const auto& p : pairs) {
    write_ppm(p.sample.image_in, dir / "images" / (p.record_in.image_id + ".ppm"));
    write_ppm(p.sample.image_non,
              dir / "images" / (p.record_non.image_id + ".ppm"));
    save_tnsr(dir / "poses" / (p.sample.id + ".tnsr"), p.sample.pose);
    records.push_back(p.record_in);
    records.push_back(p.record_non);
  }
  save_annotations(dir / "annotations.json", records);
}

// Rebuilds sample pairs from a dataset directory: images from PPM, pose from
// TNSR, heatmaps recomputed from the annotation points.
inline std::vector<SamplePair> load_dataset(const std::filesystem::path& dir) {
  auto records = load_annotations(dir / "annotations.json");
  std::map<std::string, const AnnotationRecord*> in_recs, non_recs;
  auto stem_of = [](const std::string& id, const char* suffix) -> std::string {
    const std::string suf(suffix);
    if (id.size() > suf.size() &&
        id.compare(id.size() - suf.size(), suf.size(), suf) == 0)
      return id.substr(0, id.size() - suf.size());
    return "";
  };
  for (const auto& r : records) {
    if (auto stem = stem_of(r.image_id, "_in"); !stem.empty())
      in_recs[stem] = &r;
    else if (auto stem2 = stem_of(r.image_id, "_non"); !stem2.empty())
      non_recs[stem2] = &r;
    else
      throw DataError("record " + r.image_id +
                      ": id must end in _in or _non");
  }
  std::vector<SamplePair> samples;
  for (const auto& [stem, rec_in] : in_recs) {
    auto it = non_recs.find(stem);
    if (it == non_recs.end())
      throw DataError("pair " + stem + ": missing non-interactive record");
    const AnnotationRecord* rec_non = it->second;
    SamplePair s;
    s.id = stem;
    s.affordance_label = rec_in->affordance_label;
    s.object_label = rec_in->object_label;
    s.image_in = read_ppm(dir / "images" / (rec_in->image_id + ".ppm"));
    s.image_non = read_ppm(dir / "images" / (rec_non->image_id + ".ppm"));
    s.pose = load_tnsr(dir / "poses" / (stem + ".tnsr"));
    if (s.pose.shape() != Shape{kPoseJoints, 3})
      throw DataError("pair " + stem + ": pose must be [" +
                      std::to_string(kPoseJoints) + ",3], got " +
                      shape_str(s.pose.shape()));
    s.gt_in = record_heatmaps(*rec_in);
    s.gt_non = record_heatmaps(*rec_non);
    s.fixations_in = rec_in->points;
    s.fixations_non = rec_non->points;
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct RecordKey {
  std::string id;
  std::string affordance_label;
  std::string object_label;
};

struct SplitManifest {
  std::string kind;
  uint64_t seed = 0;
  std::vector<std::string> train, val, test;
  // category partitions behind an unseen split (empty for "seen")
  std::vector<std::string> train_labels, val_labels, test_labels;
};

// seen: shuffled 7:2:1 train:test:val by id (floor for train and val, the
// remainder to test). obj_unseen / aff_unseen: hold out ~30% of the labels
// (at least 3), split those 2:1 into test and val labels, train on the rest.
inline SplitManifest build_split(const std::vector<RecordKey>& records,
                                 const std::string& kind, uint64_t seed) {
  if (kind != "seen" && kind != "obj_unseen" && kind != "aff_unseen")
    throw ConfigError("build_split: unknown kind \"" + kind + "\"");
  SplitManifest m;
  m.kind = kind;
  m.seed = seed;
  Rng rng(seed ^ 0x51c64b3a2d9f11ULL);

  std::vector<size_t> order(records.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.next_u64() % i]);

  if (kind == "seen") {
    const size_t n = records.size();
    const size_t n_train = n * 7 / 10, n_val = n / 10;
    for (size_t k = 0; k < order.size(); ++k) {
      const std::string& id = records[order[k]].id;
      if (k < n_train)
        m.train.push_back(id);
      else if (k < n_train + n_val)
        m.val.push_back(id);
      else
        m.test.push_back(id);
    }
    return m;
  }

  const bool by_object = kind == "obj_unseen";
  std::set<std::string> label_set;
  for (const auto& r : records)
    label_set.insert(by_object ? r.object_label : r.affordance_label);
  std::vector<std::string> labels(label_set.begin(), label_set.end());
  if (labels.size() < 4)
    throw DataError("build_split: " + kind + " needs at least 4 distinct " +
                    (by_object ? "object" : "affordance") + " labels, got " +
                    std::to_string(labels.size()));
  for (size_t i = labels.size(); i > 1; --i)
    std::swap(labels[i - 1], labels[rng.next_u64() % i]);

  const size_t held =
      std::max<size_t>(3, (labels.size() * 3 + 5) / 10);  // ≈30%, rounded
  const size_t n_test_labels = (2 * held + 2) / 3;        // 2:1 test:val
  for (size_t i = 0; i < labels.size(); ++i) {
    if (i < n_test_labels)
      m.test_labels.push_back(labels[i]);
    else if (i < held)
      m.val_labels.push_back(labels[i]);
    else
      m.train_labels.push_back(labels[i]);
  }
  std::sort(m.test_labels.begin(), m.test_labels.end());
  std::sort(m.val_labels.begin(), m.val_labels.end());
  std::sort(m.train_labels.begin(), m.train_labels.end());

  auto bucket_of = [&](const std::string& label) -> std::vector<std::string>* {
    if (std::binary_search(m.test_labels.begin(), m.test_labels.end(), label))
      return &m.test;
    if (std::binary_search(m.val_labels.begin(), m.val_labels.end(), label))
      return &m.val;
    return &m.train;
  };
  for (size_t k : order) {
    const auto& r = records[k];
    bucket_of(by_object ? r.object_label : r.affordance_label)
        ->push_back(r.id);
  }
  return m;
}

inline nlohmann::json manifest_to_json(const SplitManifest& m) {
  return nlohmann::json{{"split", m.kind},
                        {"seed", m.seed},
                        {"train", m.train},
                        {"val", m.val},
                        {"test", m.test},
                        {"train_labels", m.train_labels},
                        {"val_labels", m.val_labels},
                        {"test_labels", m.test_labels}};
}

inline SplitManifest manifest_from_json(const nlohmann::json& j) {
  SplitManifest m;
  try {
    m.kind = j.at("split").get<std::string>();
    m.seed = j.at("seed").get<uint64_t>();
    m.train = j.at("train").get<std::vector<std::string>>();
    m.val = j.at("val").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    m.train_labels = j.at("train_labels").get<std::vector<std::string>>();
    m.val_labels = j.at("val_labels").get<std::vector<std::string>>();
    m.test_labels = j.at("test_labels").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("split manifest: ") + e.what());
  }
  return m;
}

inline void save_manifest(const std::filesystem::path& path,
                          const SplitManifest& m) {
  atomic_write_file(path, manifest_to_json(m).dump(2) + "\n");
}

inline SplitManifest load_manifest(const std::filesystem::path& path) {
  try {
    return manifest_from_json(nlohmann::json::parse(read_file_bytes(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("manifest " + path.string() + ": parse error at byte " +
                    std::to_string(e.byte) + ": " + e.what());
  }
}

}  // namespace affnet
