#ifndef C2VAE_SCENEGEN_HPP
#define C2VAE_SCENEGEN_HPP

#include "c2vae/image.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace c2vae::scene {

enum class DatasetKind { pendulum, flow, dsprites };

DatasetKind parse_kind(const std::string& name);
std::string kind_name(DatasetKind kind);

/// Raw-unit interval used for min-max normalisation of one concept.
struct ConceptRange {
    double min = 0.0;
    double max = 1.0;

    double normalize(double raw) const;
    double denormalize(double unit) const { return min + unit * (max - min); }
};

/// Known structure of a generator. Matrices are dense row-major int grids;
/// adjacency_gt[i][j] = 1 means concept i causes concept j. mask_gt is the
/// concept-aligned factor-to-concept assignment (factor i supervises concept i).
struct GroundTruthStructure {
    std::vector<std::vector<int>> adjacency_gt;
    std::vector<std::vector<int>> mask_gt;
    std::vector<std::string> concept_names;
    std::vector<ConceptRange> normalization_ranges;

    std::size_t concept_count() const { return concept_names.size(); }
};

bool is_acyclic(const std::vector<std::vector<int>>& adjacency);

struct SceneSample {
    GrayImage image;
    std::vector<double> concepts;      ///< normalised to [0, 1]
    std::vector<double> raw_concepts;  ///< raw units
    std::uint64_t index = 0;
};

struct DatasetManifest {
    std::string name;
    std::size_t sample_count = 0;
    int image_size = 64;
    std::uint64_t seed = 0;
    GroundTruthStructure structure;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

GroundTruthStructure structure_for(DatasetKind kind);

// ---------------------------------------------------------------------------
// Pendulum geometry. Unit image coordinates, y grows downward.

namespace pendulum {

inline constexpr double kPivotX = 0.5;
inline constexpr double kPivotY = 0.2;
inline constexpr double kRodLength = 0.35;
inline constexpr double kMaxAngleDeg = 40.0;
inline constexpr double kGroundY = 0.85;
/// Drawn position of the sun disc.
inline constexpr double kSunDrawY = 0.05;
/// Height of the point light used for projection (above the frame).
inline constexpr double kLightY = -0.5;

struct Shadow {
    double length = 0.0;
    double position = 0.0;
    double left = 0.0;
    double right = 0.0;
};

struct State {
    double angle_deg = 0.0;
    double light_x = 0.5;
    double time = 12.0;
};

/// Ground-line x-coordinate hit by the ray from the light through (px, py).
double shadow_x(double light_x, double px, double py);
Shadow shadow(double angle_deg, double light_x);
std::vector<double> raw_concepts(const State& s);
GrayImage render(const State& s, int image_size);
bool in_frame(const State& s);

/// Pixel-based concept estimates (normalised units) measured directly from an
/// image, independent of any model. Time is not drawn, so it is never estimated.
struct ImageEstimate {
    std::optional<double> angle;
    std::optional<double> light;
    std::optional<double> shadow_length;
    std::optional<double> shadow_position;
};

ImageEstimate estimate_from_image(const GrayImage& image);

} // namespace pendulum

namespace flow {

inline constexpr double kReachScale = 1.2;

double water_height(double ball_radius);
/// Torricelli-style horizontal reach; zero when the hole is at or above the water line.
double reach(double water_height, double hole_height);

struct State {
    double ball_radius = 0.1;
    double hole_height = 0.2;
};

std::vector<double> raw_concepts(const State& s);
GrayImage render(const State& s, int image_size);

} // namespace flow

namespace dsprites {

struct State {
    double scale = 0.75;
    double x = 0.5;
    double y = 0.5;
};

std::vector<double> raw_concepts(const State& s);
GrayImage render(const State& s, int image_size);

} // namespace dsprites

/// Deterministic sample for (seed, index); independent of generation order.
SceneSample make_sample(DatasetKind kind, std::uint64_t seed, std::uint64_t index, int image_size);

/// Writes images/%06d.png, concepts.csv and meta.json under `out_dir`.
DatasetManifest generate_dataset(DatasetKind kind, std::size_t count, std::uint64_t seed, int image_size,
                                 const std::filesystem::path& out_dir, unsigned threads = 0);

DatasetManifest read_manifest(const std::filesystem::path& dataset_dir);

} // namespace c2vae::scene

#endif // C2VAE_SCENEGEN_HPP
