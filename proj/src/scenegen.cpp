#include "c2vae/scenegen.hpp"

#include "c2vae/common.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

namespace c2vae::scene {

namespace {

constexpr int kSupersample = 4;
constexpr int kMaxRetries = 1000;

double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }

/// Supersampled canvas in unit coordinates. Shapes paint opaque intensities in
/// order; the final image is a box-filtered downsample.
class Canvas {
public:
    Canvas(int image_size, float background)
        : size_(image_size * kSupersample), hi_(size_, size_, background), out_size_(image_size)
    {
    }

    template <class Inside>
    void paint(double x0, double y0, double x1, double y1, float value, Inside inside)
    {
        const int c0 = std::max(0, static_cast<int>(std::floor(x0 * size_)));
        const int c1 = std::min(size_ - 1, static_cast<int>(std::ceil(x1 * size_)));
        const int r0 = std::max(0, static_cast<int>(std::floor(y0 * size_)));
        const int r1 = std::min(size_ - 1, static_cast<int>(std::ceil(y1 * size_)));
        for (int r = r0; r <= r1; ++r) {
            const double py = (r + 0.5) / size_;
            for (int c = c0; c <= c1; ++c) {
                const double px = (c + 0.5) / size_;
                if (inside(px, py)) {
                    hi_.at(r, c) = value;
                }
            }
        }
    }

    void rect(double x0, double y0, double x1, double y1, float value)
    {
        paint(x0, y0, x1, y1, value, [&](double px, double py) { return px >= x0 && px < x1 && py >= y0 && py < y1; });
    }

    void disc(double cx, double cy, double radius, float value)
    {
        paint(cx - radius, cy - radius, cx + radius, cy + radius, value, [&](double px, double py) {
            const double dx = px - cx;
            const double dy = py - cy;
            return dx * dx + dy * dy <= radius * radius;
        });
    }

    void ellipse(double cx, double cy, double ax, double ay, float value)
    {
        paint(cx - ax, cy - ay, cx + ax, cy + ay, value, [&](double px, double py) {
            const double u = (px - cx) / ax;
            const double v = (py - cy) / ay;
            return u * u + v * v <= 1.0;
        });
    }

    /// Segment with round caps.
    void capsule(double ax, double ay, double bx, double by, double half_width, float value)
    {
        const double dx = bx - ax;
        const double dy = by - ay;
        const double len2 = dx * dx + dy * dy;
        paint(std::min(ax, bx) - half_width, std::min(ay, by) - half_width, std::max(ax, bx) + half_width,
              std::max(ay, by) + half_width, value, [&](double px, double py) {
                  double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
                  t = std::clamp(t, 0.0, 1.0);
                  const double qx = ax + t * dx - px;
                  const double qy = ay + t * dy - py;
                  return qx * qx + qy * qy <= half_width * half_width;
              });
    }

    GrayImage finish() const { return downsample(hi_, kSupersample); }

private:
    int size_;
    GrayImage hi_;
    int out_size_;
};

void check_image_size(int image_size)
{
    if (image_size != 32 && image_size != 64) {
        throw UsageError("image_size must be 32 or 64, got " + std::to_string(image_size));
    }
}

std::vector<std::vector<int>> zeros(std::size_t rows, std::size_t cols)
{
    return std::vector<std::vector<int>>(rows, std::vector<int>(cols, 0));
}

std::vector<std::vector<int>> identity(std::size_t n)
{
    auto m = zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m[i][i] = 1;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Pendulum analytic ranges over the accepted (angle, light) domain.

struct PendulumRanges {
    ConceptRange length;
    ConceptRange position;
};

const PendulumRanges& pendulum_ranges()
{
    static const PendulumRanges ranges = [] {
        PendulumRanges out{{0.0, 0.0}, {std::numeric_limits<double>::max(), std::numeric_limits<double>::lowest()}};
        constexpr int kGrid = 801;
        for (int a = 0; a < kGrid; ++a) {
            const double angle = -pendulum::kMaxAngleDeg + 2.0 * pendulum::kMaxAngleDeg * a / (kGrid - 1);
            for (int l = 0; l < kGrid; ++l) {
                const double light = 0.1 + 0.8 * l / (kGrid - 1);
                const pendulum::State s{angle, light, 12.0};
                if (!pendulum::in_frame(s)) {
                    continue;
                }
                const auto sh = pendulum::shadow(angle, light);
                out.length.max = std::max(out.length.max, sh.length);
                out.position.min = std::min(out.position.min, sh.position);
                out.position.max = std::max(out.position.max, sh.position);
            }
        }
        return out;
    }();
    return ranges;
}

const ConceptRange& flow_reach_range()
{
    static const ConceptRange range = [] {
        ConceptRange out{std::numeric_limits<double>::max(), std::numeric_limits<double>::lowest()};
        constexpr int kGrid = 801;
        for (int a = 0; a < kGrid; ++a) {
            const double r = 0.08 + 0.10 * a / (kGrid - 1);
            const double h = flow::water_height(r);
            for (int b = 0; b < kGrid; ++b) {
                const double q = 0.1 + 0.15 * b / (kGrid - 1);
                const double f = flow::reach(h, q);
                out.min = std::min(out.min, f);
                out.max = std::max(out.max, f);
            }
        }
        return out;
    }();
    return range;
}

std::vector<double> normalize_all(const std::vector<double>& raw, const std::vector<ConceptRange>& ranges)
{
    std::vector<double> out(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j) {
        out[j] = ranges[j].normalize(raw[j]);
    }
    return out;
}

} // namespace

DatasetKind parse_kind(const std::string& name)
{
    if (name == "pendulum") {
        return DatasetKind::pendulum;
    }
    if (name == "flow") {
        return DatasetKind::flow;
    }
    if (name == "dsprites") {
        return DatasetKind::dsprites;
    }
    throw UsageError("unknown dataset '" + name + "' (expected pendulum, flow or dsprites)");
}

std::string kind_name(DatasetKind kind)
{
    switch (kind) {
    case DatasetKind::pendulum:
        return "pendulum";
    case DatasetKind::flow:
        return "flow";
    case DatasetKind::dsprites:
        return "dsprites";
    }
    return "unknown";
}

double ConceptRange::normalize(double raw) const
{
    const double span = max - min;
    if (span <= 0.0) {
        return 0.0;
    }
    return std::clamp((raw - min) / span, 0.0, 1.0);
}

bool is_acyclic(const std::vector<std::vector<int>>& adjacency)
{
    const std::size_t n = adjacency.size();
    std::vector<int> indegree(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (adjacency[i][j] != 0) {
                ++indegree[j];
            }
        }
    }
    std::vector<std::size_t> ready;
    for (std::size_t i = 0; i < n; ++i) {
        if (indegree[i] == 0) {
            ready.push_back(i);
        }
    }
    std::size_t visited = 0;
    while (!ready.empty()) {
        const auto i = ready.back();
        ready.pop_back();
        ++visited;
        for (std::size_t j = 0; j < n; ++j) {
            if (adjacency[i][j] != 0 && --indegree[j] == 0) {
                ready.push_back(j);
            }
        }
    }
    return visited == n;
}

GroundTruthStructure structure_for(DatasetKind kind)
{
    GroundTruthStructure gt;
    switch (kind) {
    case DatasetKind::pendulum: {
        gt.concept_names = {"pendulum_angle", "light_position", "time", "shadow_length", "shadow_position"};
        const auto& pr = pendulum_ranges();
        gt.normalization_ranges = {{-pendulum::kMaxAngleDeg, pendulum::kMaxAngleDeg}, {0.1, 0.9}, {6.0, 18.0},
                                   pr.length, pr.position};
        gt.adjacency_gt = zeros(5, 5);
        for (int cause : {0, 1}) {
            for (int effect : {3, 4}) {
                gt.adjacency_gt[cause][effect] = 1;
            }
        }
        // time and light position read from one shared factor (the time slot)
        gt.mask_gt = identity(5);
        gt.mask_gt[2][1] = 1;
        break;
    }
    case DatasetKind::flow:
        gt.concept_names = {"ball_size", "water_height", "hole", "water_flow"};
        gt.normalization_ranges = {{0.08, 0.18}, {flow::water_height(0.08), flow::water_height(0.18)}, {0.1, 0.25},
                                   flow_reach_range()};
        gt.adjacency_gt = zeros(4, 4);
        gt.adjacency_gt[0][1] = 1;
        gt.adjacency_gt[1][3] = 1;
        gt.adjacency_gt[2][3] = 1;
        gt.mask_gt = identity(4);
        break;
    case DatasetKind::dsprites:
        gt.concept_names = {"scale", "x_position", "x_plus_y", "x2_plus_y2"};
        gt.normalization_ranges = {{0.5, 1.0}, {0.2, 0.8}, {0.4, 1.6}, {0.08, 1.28}};
        gt.adjacency_gt = zeros(4, 4);
        // x feeds concepts 1..3 and y feeds 2..3; under the lower-triangular
        // constraint the shared inputs sit in the later slots.
        gt.mask_gt = identity(4);
        gt.mask_gt[2][1] = 1;
        gt.mask_gt[3][1] = 1;
        gt.mask_gt[3][2] = 1;
        break;
    }
    return gt;
}

// ---------------------------------------------------------------------------

namespace pendulum {

double shadow_x(double light_x, double px, double py)
{
    return light_x + (kGroundY - kLightY) * (px - light_x) / (py - kLightY);
}

Shadow shadow(double angle_deg, double light_x)
{
    const double theta = deg2rad(angle_deg);
    const double tip_x = kPivotX + kRodLength * std::sin(theta);
    const double tip_y = kPivotY + kRodLength * std::cos(theta);
    const double a = shadow_x(light_x, kPivotX, kPivotY);
    const double b = shadow_x(light_x, tip_x, tip_y);
    Shadow s;
    s.length = std::abs(b - a);
    s.position = 0.5 * (a + b);
    s.left = std::min(a, b);
    s.right = std::max(a, b);
    return s;
}

namespace {
constexpr double kShadowHalf = 0.03;
constexpr double kShadowY = 0.91;
constexpr float kSky = 0.6F;
constexpr float kGround = 0.85F;
constexpr float kInk = 0.15F;
constexpr float kShadowInk = 0.25F;
} // namespace

bool in_frame(const State& s)
{
    const auto sh = shadow(s.angle_deg, s.light_x);
    return sh.left >= kShadowHalf && sh.right <= 1.0 - kShadowHalf;
}

std::vector<double> raw_concepts(const State& s)
{
    const auto sh = shadow(s.angle_deg, s.light_x);
    return {s.angle_deg, s.light_x, s.time, sh.length, sh.position};
}

GrayImage render(const State& s, int image_size)
{
    check_image_size(image_size);
    Canvas canvas(image_size, kSky);
    canvas.rect(0.0, kGroundY, 1.0, 1.0, kGround);
    canvas.disc(s.light_x, kSunDrawY, 0.05, 1.0F);
    const double theta = deg2rad(s.angle_deg);
    const double tip_x = kPivotX + kRodLength * std::sin(theta);
    const double tip_y = kPivotY + kRodLength * std::cos(theta);
    canvas.capsule(kPivotX, kPivotY, tip_x, tip_y, 0.015, kInk);
    canvas.disc(tip_x, tip_y, 0.05, kInk);
    const auto sh = shadow(s.angle_deg, s.light_x);
    canvas.capsule(sh.left, kShadowY, sh.right, kShadowY, kShadowHalf, kShadowInk);
    return canvas.finish();
}

ImageEstimate estimate_from_image(const GrayImage& image)
{
    ImageEstimate est;
    const auto& ranges = structure_for(DatasetKind::pendulum).normalization_ranges;
    const double h = image.height;
    const double w = image.width;

    // sun: bright mass in the top band
    double mass = 0.0;
    double mx = 0.0;
    for (int r = 0; r < image.height && (r + 1) / h <= 0.125; ++r) {
        for (int c = 0; c < image.width; ++c) {
            const double v = std::max(0.0, image.at(r, c) - 0.8);
            mass += v;
            mx += v * (c + 0.5) / w;
        }
    }
    if (mass > 1e-6) {
        est.light = ranges[1].normalize(mx / mass);
    }

    // rod + bob: dark mass between pivot and ground, direction from the pivot
    mass = 0.0;
    mx = 0.0;
    double my = 0.0;
    for (int r = 0; r < image.height; ++r) {
        const double y = (r + 0.5) / h;
        if (y < 0.24 || y > 0.64) {
            continue;
        }
        for (int c = 0; c < image.width; ++c) {
            const double v = std::max(0.0, static_cast<double>(kSky) - image.at(r, c));
            mass += v;
            mx += v * (c + 0.5) / w;
            my += v * y;
        }
    }
    if (mass > 1e-6) {
        const double angle = std::atan2(mx / mass - kPivotX, my / mass - kPivotY) * 180.0 / std::numbers::pi;
        est.angle = ranges[0].normalize(angle);
    }

    // shadow: dark area inside the ground rows that contain the shadow band
    mass = 0.0;
    mx = 0.0;
    const double pixel_area = 1.0 / (h * w);
    for (int r = 0; r < image.height; ++r) {
        if (r / h < 0.86 || (r + 1) / h > 0.99) {
            continue;
        }
        for (int c = 0; c < image.width; ++c) {
            const double cover =
                std::clamp((static_cast<double>(kGround) - image.at(r, c)) / (kGround - kShadowInk), 0.0, 1.0);
            mass += cover * pixel_area;
            mx += cover * pixel_area * (c + 0.5) / w;
        }
    }
    if (mass > 1e-6) {
        const double cap_area = std::numbers::pi * kShadowHalf * kShadowHalf;
        const double length = std::max(0.0, (mass - cap_area) / (2.0 * kShadowHalf));
        est.shadow_length = ranges[3].normalize(length);
        est.shadow_position = ranges[4].normalize(mx / mass);
    }
    return est;
}

} // namespace pendulum

// ---------------------------------------------------------------------------

namespace flow {

double water_height(double ball_radius) { return 0.30 + 4.0 * ball_radius * ball_radius; }

double reach(double h, double q) { return kReachScale * std::sqrt(std::max(h - q, 0.0) * q); }

std::vector<double> raw_concepts(const State& s)
{
    const double h = water_height(s.ball_radius);
    return {s.ball_radius, h, s.hole_height, reach(h, s.hole_height)};
}

GrayImage render(const State& s, int image_size)
{
    check_image_size(image_size);
    constexpr double kLeft = 0.15;
    constexpr double kRight = 0.55;
    constexpr double kBottom = 0.9;
    constexpr double kTop = 0.3;
    constexpr double kWall = 0.02;
    const double h = water_height(s.ball_radius);
    const double f = reach(h, s.hole_height);

    Canvas canvas(image_size, 0.9F);
    canvas.rect(0.0, kBottom, 1.0, 1.0, 0.5F);
    canvas.rect(kLeft, kBottom - h, kRight, kBottom, 0.6F);
    canvas.disc(0.5 * (kLeft + kRight), kBottom - s.ball_radius, s.ball_radius, 0.1F);
    canvas.rect(kLeft - kWall, kTop, kLeft, kBottom, 0.2F);
    canvas.rect(kRight, kTop, kRight + kWall, kBottom, 0.2F);
    canvas.rect(kLeft - kWall, kBottom, kRight + kWall, kBottom + kWall, 0.2F);

    const double hole_y = kBottom - s.hole_height;
    canvas.rect(kRight, hole_y - 0.012, kRight + kWall, hole_y + 0.012, 0.9F);
    if (f > 0.0) {
        // ballistic arc from the hole down to the floor line
        const double x0 = kRight + kWall;
        const double span = 1.6 * f;
        constexpr int kSegments = 16;
        for (int i = 0; i < kSegments; ++i) {
            const double t0 = static_cast<double>(i) / kSegments;
            const double t1 = static_cast<double>(i + 1) / kSegments;
            canvas.capsule(x0 + span * t0, hole_y + s.hole_height * t0 * t0, x0 + span * t1,
                           hole_y + s.hole_height * t1 * t1, 0.012, 0.35F);
        }
    }
    return canvas.finish();
}

} // namespace flow

namespace dsprites {

std::vector<double> raw_concepts(const State& s)
{
    return {s.scale, s.x, s.x + s.y, s.x * s.x + s.y * s.y};
}

GrayImage render(const State& s, int image_size)
{
    check_image_size(image_size);
    Canvas canvas(image_size, 0.0F);
    canvas.ellipse(s.x, s.y, 0.16 * s.scale, 0.10 * s.scale, 1.0F);
    return canvas.finish();
}

} // namespace dsprites

// ---------------------------------------------------------------------------

SceneSample make_sample(DatasetKind kind, std::uint64_t seed, std::uint64_t index, int image_size)
{
    check_image_size(image_size);
    Rng rng(seed, index);
    const auto gt = structure_for(kind);
    SceneSample sample;
    sample.index = index;
    switch (kind) {
    case DatasetKind::pendulum: {
        pendulum::State s;
        int attempt = 0;
        for (;; ++attempt) {
            if (attempt >= kMaxRetries) {
                throw DataError("pendulum: no in-frame configuration after " + std::to_string(kMaxRetries) +
                                " draws for sample " + std::to_string(index));
            }
            s.angle_deg = rng.uniform(-pendulum::kMaxAngleDeg, pendulum::kMaxAngleDeg);
            const double u = rng.uniform();
            s.light_x = std::clamp(0.1 + 0.8 * u + rng.normal(0.0, 0.01), 0.1, 0.9);
            s.time = std::clamp(6.0 + 12.0 * u + rng.normal(0.0, 0.1), 6.0, 18.0);
            if (pendulum::in_frame(s)) {
                break;
            }
        }
        sample.image = pendulum::render(s, image_size);
        sample.raw_concepts = pendulum::raw_concepts(s);
        break;
    }
    case DatasetKind::flow: {
        flow::State s;
        s.ball_radius = rng.uniform(0.08, 0.18);
        s.hole_height = rng.uniform(0.1, 0.25);
        sample.image = flow::render(s, image_size);
        sample.raw_concepts = flow::raw_concepts(s);
        break;
    }
    case DatasetKind::dsprites: {
        dsprites::State s;
        s.scale = rng.uniform(0.5, 1.0);
        s.x = rng.uniform(0.2, 0.8);
        s.y = rng.uniform(0.2, 0.8);
        sample.image = dsprites::render(s, image_size);
        sample.raw_concepts = dsprites::raw_concepts(s);
        break;
    }
    }
    sample.concepts = normalize_all(sample.raw_concepts, gt.normalization_ranges);
    return sample;
}

nlohmann::json DatasetManifest::to_json() const
{
    nlohmann::json ranges = nlohmann::json::array();
    for (const auto& r : structure.normalization_ranges) {
        ranges.push_back({r.min, r.max});
    }
    return {
        {"name", name},
        {"sample_count", sample_count},
        {"image_size", image_size},
        {"seed", seed},
        {"concept_names", structure.concept_names},
        {"normalization_ranges", ranges},
        {"adjacency_gt", structure.adjacency_gt},
        {"mask_gt", structure.mask_gt},
    };
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j)
{
    try {
        DatasetManifest m;
        m.name = j.at("name").get<std::string>();
        m.sample_count = j.at("sample_count").get<std::size_t>();
        m.image_size = j.at("image_size").get<int>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.structure.concept_names = j.at("concept_names").get<std::vector<std::string>>();
        for (const auto& r : j.at("normalization_ranges")) {
            m.structure.normalization_ranges.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
        }
        m.structure.adjacency_gt = j.at("adjacency_gt").get<std::vector<std::vector<int>>>();
        m.structure.mask_gt = j.at("mask_gt").get<std::vector<std::vector<int>>>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed dataset manifest: ") + e.what());
    }
}

DatasetManifest generate_dataset(DatasetKind kind, std::size_t count, std::uint64_t seed, int image_size,
                                 const std::filesystem::path& out_dir, unsigned threads)
{
    if (count == 0) {
        throw UsageError("sample count must be positive");
    }
    check_image_size(image_size);
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "images");

    std::vector<std::vector<double>> concepts(count);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) {
                return;
            }
            try {
                auto sample = make_sample(kind, seed, i, image_size);
                std::ostringstream name;
                name << std::setw(6) << std::setfill('0') << i << ".png";
                write_png(out_dir / "images" / name.str(), sample.image);
                concepts[i] = std::move(sample.concepts);
            } catch (...) {
                std::scoped_lock lock(failure_mutex);
                if (!failure) {
                    failure = std::current_exception();
                }
                next.store(count);
                return;
            }
        }
    };
    const unsigned n_threads = std::max(1U, threads != 0 ? threads : std::thread::hardware_concurrency());
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) {
        pool.emplace_back(worker);
    }
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }

    DatasetManifest manifest;
    manifest.name = kind_name(kind);
    manifest.sample_count = count;
    manifest.image_size = image_size;
    manifest.seed = seed;
    manifest.structure = structure_for(kind);

    std::ofstream csv(out_dir / "concepts.csv");
    for (std::size_t j = 0; j < manifest.structure.concept_names.size(); ++j) {
        csv << (j == 0 ? "" : ",") << manifest.structure.concept_names[j];
    }
    csv << '\n';
    for (const auto& row : concepts) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            csv << (j == 0 ? "" : ",") << format_sig(row[j], 9);
        }
        csv << '\n';
    }
    std::ofstream(out_dir / "meta.json") << manifest.to_json().dump(2) << '\n';
    return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& dataset_dir)
{
    std::ifstream in(dataset_dir / "meta.json");
    if (!in) {
        throw DataError("no meta.json in " + dataset_dir.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("cannot parse " + (dataset_dir / "meta.json").string() + ": " + e.what());
    }
    return DatasetManifest::from_json(j);
}

} // namespace c2vae::scene
