#include "c2vae/dataset.hpp"

#include "c2vae/common.hpp"
#include "c2vae/image.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace c2vae::data {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        out.push_back(cell);
    }
    return out;
}

} // namespace

Dataset load_dataset(const fs::path& dir)
{
    Dataset ds;
    ds.root = dir;
    ds.manifest = scene::read_manifest(dir);
    const auto& names = ds.manifest.structure.concept_names;
    const auto m = static_cast<int64_t>(names.size());
    const auto count = static_cast<int64_t>(ds.manifest.sample_count);
    const int size = ds.manifest.image_size;

    std::ifstream csv(dir / "concepts.csv");
    if (!csv) {
        throw DataError("no concepts.csv in " + dir.string());
    }
    std::string line;
    std::getline(csv, line);
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    if (split_csv_line(line) != names) {
        throw DataError("concepts.csv header does not match meta.json concept names");
    }
    ds.concepts = torch::empty({count, m}, torch::kFloat32);
    auto concepts = ds.concepts.accessor<float, 2>();
    int64_t row = 0;
    while (std::getline(csv, line)) {
        if (line.empty()) {
            continue;
        }
        if (row >= count) {
            throw DataError("concepts.csv has more rows than sample_count");
        }
        const auto cells = split_csv_line(line);
        if (static_cast<int64_t>(cells.size()) != m) {
            throw DataError("concepts.csv row " + std::to_string(row) + " has the wrong number of columns");
        }
        for (int64_t j = 0; j < m; ++j) {
            try {
                concepts[row][j] = std::stof(cells[j]);
            } catch (const std::exception&) {
                throw DataError("concepts.csv row " + std::to_string(row) + ": bad value '" + cells[j] + "'");
            }
        }
        ++row;
    }
    if (row != count) {
        throw DataError("concepts.csv has " + std::to_string(row) + " rows, meta.json says " + std::to_string(count));
    }

    ds.images = torch::empty({count, 1, size, size}, torch::kFloat32);
    auto* dst = ds.images.data_ptr<float>();
    for (int64_t i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%06lld.png", static_cast<long long>(i));
        const auto path = dir / "images" / name;
        if (!fs::exists(path)) {
            throw DataError("missing image " + path.string());
        }
        const auto img = read_png(path);
        if (img.height != size || img.width != size) {
            throw DataError("image " + path.string() + " does not match image_size " + std::to_string(size));
        }
        std::copy(img.pixels.begin(), img.pixels.end(), dst + i * size * size);
    }
    return ds;
}

bool is_validation_index(uint64_t index)
{
    return splitmix64(index ^ 0x5EEDF00DULL) % 10U == 0U;
}

Split split_indices(int64_t count)
{
    Split s;
    for (int64_t i = 0; i < count; ++i) {
        (is_validation_index(static_cast<uint64_t>(i)) ? s.validation : s.train).push_back(i);
    }
    return s;
}

torch::Tensor gather_rows(const torch::Tensor& tensor, const std::vector<int64_t>& indices)
{
    const auto idx = torch::tensor(indices, torch::kLong);
    return tensor.index_select(0, idx);
}

} // namespace c2vae::data
