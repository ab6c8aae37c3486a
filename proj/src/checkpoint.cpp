#include "c2vae/checkpoint.hpp"

#include "c2vae/common.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace c2vae::ckpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<int64_t> shape_of(const json& j)
{
    return j.get<std::vector<int64_t>>();
}

std::string file_name(const std::string& path)
{
    return path + ".f32";
}

} // namespace

void write_raw(const fs::path& path, const torch::Tensor& tensor)
{
    const auto t = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    std::vector<char> bytes(static_cast<std::size_t>(t.numel()) * 4);
    std::memcpy(bytes.data(), t.data_ptr<float>(), bytes.size());
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < bytes.size(); i += 4) {
            std::swap(bytes[i], bytes[i + 3]);
            std::swap(bytes[i + 1], bytes[i + 2]);
        }
    }
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
}

torch::Tensor read_raw(const fs::path& path, torch::IntArrayRef shape)
{
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    auto out = torch::empty(shape, torch::kFloat32);
    const auto expected = static_cast<std::streamoff>(out.numel() * 4);
    if (in.tellg() != expected) {
        throw DataError(path.string() + " has the wrong size for shape " + c10::str(shape));
    }
    in.seekg(0);
    std::vector<char> bytes(static_cast<std::size_t>(expected));
    in.read(bytes.data(), expected);
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < bytes.size(); i += 4) {
            std::swap(bytes[i], bytes[i + 3]);
            std::swap(bytes[i + 1], bytes[i + 2]);
        }
    }
    std::memcpy(out.data_ptr<float>(), bytes.data(), bytes.size());
    return out;
}

json model_config_to_json(const model::ModelConfig& c)
{
    return {{"n", c.spec.n},
            {"k", c.spec.k},
            {"d", c.spec.d},
            {"m", c.spec.m},
            {"image_size", c.image_size},
            {"hidden_width", c.hidden_width},
            {"head_hidden", c.head_hidden}};
}

model::ModelConfig model_config_from_json(const json& j)
{
    model::ModelConfig c;
    c.spec.n = j.at("n").get<int64_t>();
    c.spec.k = j.at("k").get<int64_t>();
    c.spec.d = j.at("d").get<int64_t>();
    c.spec.m = j.at("m").get<int64_t>();
    c.image_size = j.at("image_size").get<int64_t>();
    c.hidden_width = j.at("hidden_width").get<int64_t>();
    c.head_hidden = j.at("head_hidden").get<int64_t>();
    c.validate();
    return c;
}

void save(const fs::path& dir, const model::C2VaeImpl& model, const json& state, const torch::optim::AdamW* optimizer)
{
    auto staging = dir;
    staging += ".partial";
    fs::remove_all(staging);
    fs::create_directories(staging);

    json manifest;
    manifest["format"] = "c2vae-checkpoint";
    manifest["version"] = std::string(kVersion);
    manifest["model"] = model_config_to_json(model.config());
    manifest["structure_pinned"] = model.structure_pinned();
    json tensors = json::array();
    std::map<const void*, std::string> names;
    for (const auto& item : model.named_parameters()) {
        write_raw(staging / file_name(item.key()), item.value());
        tensors.push_back({{"name", item.key()}, {"kind", "parameter"}, {"file", file_name(item.key())},
                           {"shape", item.value().sizes().vec()}});
        names[item.value().unsafeGetTensorImpl()] = item.key();
    }
    for (const auto& item : model.named_buffers()) {
        write_raw(staging / file_name(item.key()), item.value());
        tensors.push_back({{"name", item.key()}, {"kind", "buffer"}, {"file", file_name(item.key())},
                           {"shape", item.value().sizes().vec()}});
    }
    manifest["tensors"] = tensors;

    if (optimizer != nullptr) {
        json entries = json::array();
        for (const auto& p : model.trainable_parameters()) {
            const auto& name = names.at(p.unsafeGetTensorImpl());
            const auto it = optimizer->state().find(p.unsafeGetTensorImpl());
            if (it == optimizer->state().end()) {
                entries.push_back({{"param", name}, {"step", 0}});
                continue;
            }
            const auto& st = static_cast<const torch::optim::AdamWParamState&>(*it->second);
            const auto m1 = "adamw." + name + ".exp_avg";
            const auto m2 = "adamw." + name + ".exp_avg_sq";
            write_raw(staging / file_name(m1), st.exp_avg());
            write_raw(staging / file_name(m2), st.exp_avg_sq());
            entries.push_back({{"param", name}, {"step", st.step()}, {"exp_avg", file_name(m1)},
                               {"exp_avg_sq", file_name(m2)}});
        }
        manifest["optimizer"] = {{"kind", "adamw"}, {"entries", entries}};
    } else {
        manifest["optimizer"] = nullptr;
    }
    manifest["state"] = state;
    std::ofstream(staging / "manifest.json") << manifest.dump(2) << '\n';

    fs::remove_all(dir);
    fs::rename(staging, dir);
}

Loaded load(const fs::path& dir, torch::Dtype dtype)
{
    std::ifstream in(dir / "manifest.json");
    if (!in) {
        throw DataError("no manifest.json in checkpoint " + dir.string());
    }
    Loaded out;
    try {
        in >> out.manifest;
    } catch (const json::exception& e) {
        throw DataError("cannot parse checkpoint manifest: " + std::string(e.what()));
    }
    if (out.manifest.value("format", "") != "c2vae-checkpoint") {
        throw DataError(dir.string() + " is not a checkpoint");
    }
    const auto config = model_config_from_json(out.manifest.at("model"));
    out.model = model::C2Vae(config);
    auto params = out.model->named_parameters();
    auto buffers = out.model->named_buffers();
    torch::NoGradGuard guard;
    for (const auto& t : out.manifest.at("tensors")) {
        const auto name = t.at("name").get<std::string>();
        const auto shape = shape_of(t.at("shape"));
        const auto value = read_raw(dir / t.at("file").get<std::string>(), shape);
        torch::Tensor* target = params.find(name);
        if (target == nullptr) {
            target = buffers.find(name);
        }
        if (target == nullptr || target->sizes() != torch::IntArrayRef(shape)) {
            throw DataError("checkpoint tensor '" + name + "' does not fit the model");
        }
        target->copy_(value);
    }
    if (out.manifest.at("structure_pinned").get<bool>()) {
        out.model->pin_structure(out.model->adjacency_raw.detach().clone(), out.model->fixed_mask.clone());
    }
    out.model->to(dtype);
    return out;
}

void restore_optimizer(const fs::path& dir, const json& manifest, const model::C2VaeImpl& model,
                       torch::optim::AdamW& optimizer)
{
    const auto& opt = manifest.at("optimizer");
    if (opt.is_null()) {
        throw DataError("checkpoint " + dir.string() + " has no optimiser state");
    }
    std::map<std::string, json> entries;
    for (const auto& e : opt.at("entries")) {
        entries[e.at("param").get<std::string>()] = e;
    }
    for (const auto& item : model.named_parameters()) {
        const auto& p = item.value();
        if (!p.requires_grad()) {
            continue;
        }
        const auto it = entries.find(item.key());
        if (it == entries.end()) {
            throw DataError("optimiser state missing for " + item.key());
        }
        const auto step = it->second.at("step").get<int64_t>();
        if (step == 0) {
            continue;
        }
        auto st = std::make_unique<torch::optim::AdamWParamState>();
        st->step(step);
        st->exp_avg(read_raw(dir / it->second.at("exp_avg").get<std::string>(), p.sizes()).to(p.dtype()));
        st->exp_avg_sq(read_raw(dir / it->second.at("exp_avg_sq").get<std::string>(), p.sizes()).to(p.dtype()));
        optimizer.state()[p.unsafeGetTensorImpl()] = std::move(st);
    }
}

} // namespace c2vae::ckpt
