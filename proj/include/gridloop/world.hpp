#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gridloop/common.hpp"

namespace gridloop {

// Inclusive-exclusive cell box [x0,x1) x [y0,y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long area() const { return static_cast<long>(width()) * height(); }
  bool operator==(const Box&) const = default;
};

enum class Qualifier {
  kNone = 0,
  kLeftmost,
  kRightmost,
  kTopmost,
  kBottommost,
  kLargest,
  kSmallest,
};
inline constexpr int kNumQualifiers = 7;

const char* qualifier_name(Qualifier q);
std::optional<Qualifier> qualifier_from_name(const std::string& name);

struct Expression {
  int color = 0;  // color id in [0, C)
  Qualifier qual = Qualifier::kNone;
  bool operator==(const Expression&) const = default;
};

struct LayoutItem {
  Expression expr;
  Box box;
  bool operator==(const LayoutItem&) const = default;
};

struct Layout {
  std::vector<LayoutItem> items;
  bool operator==(const Layout&) const = default;
};

// H x W grid of codebook ids; id 0 is background, color c renders as id c+1.
struct GridImage {
  int h = 0, w = 0;
  std::vector<int> cells;  // row-major, size h*w

  int at(int x, int y) const { return cells[y * w + x]; }
  int& at(int x, int y) { return cells[y * w + x]; }
  bool operator==(const GridImage&) const = default;
};

struct WorldConfig {
  int h = 16, w = 16;
  int colors = 6;         // C
  int k_max = 5;          // max items per layout (min is 2)
  int min_box_side = 2;
  int v_img = 0;          // image codebook size; 0 means colors + 1
  uint64_t seed = 0;

  int image_vocab() const { return v_img > 0 ? v_img : colors + 1; }
};

// Raises OutOfBounds / OverlapError / std::invalid_argument on a bad layout.
void validate_layout(const Layout& layout, const WorldConfig& cfg);

// Fills each item's box with its color token (color c -> id c+1) over a
// zero background. Pure function of its inputs.
GridImage render(const Layout& layout, const WorldConfig& cfg);

// Qualifier ordering over candidate boxes: leftmost = min x0, rightmost =
// max x1, topmost = min y0, bottommost = max y1, largest/smallest by area;
// every tie (and the 'none' qualifier) breaks on smaller (y0, x0). Returns
// true when a is preferred over b.
bool qualifier_prefers(const Box& a, const Box& b, Qualifier q);

// Exact grounding: connected components (4-neighbour) of expr.color, pick
// one by qualifier, return its bounding box. Ties break on smaller (y0, x0).
// Throws NotFound / Ambiguous.
Box ground_oracle(const GridImage& image, const Expression& expr);

// One detection per connected component of each non-background id.
struct Detection {
  int color = 0;
  Box box;
  double score = 0.0;  // solidity: filled cells / box area
};
std::vector<Detection> detect_components(const GridImage& image);

// Rejection-samples a layout whose every expression grounds back to its own
// box under the oracle. Throws SamplingExhausted after max_attempts.
Layout sample_layout(Rng& rng, const WorldConfig& cfg, int max_attempts = 1000);

double iou(const Box& a, const Box& b);

// JSON document {"H":..,"W":..,"items":[...],"cells":[...]}; cells optional.
std::string to_json(const Layout& layout, const WorldConfig& cfg,
                    const GridImage* image = nullptr);
struct WorldRecord {
  int h = 0, w = 0;
  Layout layout;
  std::optional<GridImage> image;
};
WorldRecord world_record_from_json(const std::string& text);

}  // namespace gridloop
