#include "aulab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "aulab/io.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace aulab {

using ojson = nlohmann::ordered_json;

namespace {

constexpr int kFormatVersion = 1;

void append_f32(std::string& out, const std::vector<double>& values) {
    for (double v : values) {
        float f = static_cast<float>(v);
        char bytes[4];
        std::memcpy(bytes, &f, 4);
        out.append(bytes, 4);
    }
}

std::vector<double> read_f32(const std::string& bytes, size_t offset, size_t count) {
    std::vector<double> out(count);
    for (size_t i = 0; i < count; ++i) {
        float f;
        std::memcpy(&f, bytes.data() + offset + 4 * i, 4);
        out[i] = static_cast<double>(f);
    }
    return out;
}

size_t numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

ojson tensor_entry(const std::string& name, const std::vector<int>& shape, size_t offset) {
    ojson e;
    e["name"] = name;
    e["shape"] = shape;
    e["dtype"] = "f32";
    e["byte_offset"] = offset;
    return e;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& dir,
                     const AdamState* optimizer) {
    for (const std::string& name : params.names())
        if (!params.at(name).all_finite())
            throw std::runtime_error("save_checkpoint: non-finite values in " + name);

    std::string blob;
    ojson manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["config"] = model_config_to_json(params.config());
    ojson table = ojson::array();
    for (const std::string& name : params.names()) {
        const Tensor& t = params.at(name);
        table.push_back(tensor_entry(name, t.shape(), blob.size()));
        append_f32(blob, t.data());
    }
    manifest["tensors"] = std::move(table);

    if (optimizer) {
        if (optimizer->m.size() != params.names().size())
            throw std::invalid_argument("save_checkpoint: optimizer state size mismatch");
        ojson opt;
        opt["step"] = optimizer->step;
        ojson opt_table = ojson::array();
        for (size_t i = 0; i < params.names().size(); ++i) {
            const std::string& pname = params.names()[i];
            const std::vector<int>& shape = params.at(pname).shape();
            opt_table.push_back(tensor_entry("opt.m." + pname, shape, blob.size()));
            append_f32(blob, optimizer->m[i]);
            opt_table.push_back(tensor_entry("opt.v." + pname, shape, blob.size()));
            append_f32(blob, optimizer->v[i]);
        }
        opt["tensors"] = std::move(opt_table);
        manifest["optimizer"] = std::move(opt);
    }

    atomic_write_file(dir / "manifest.json", manifest.dump(2) + "\n");
    atomic_write_file(dir / "weights.bin", blob);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    ojson manifest;
    try {
        manifest = ojson::parse(read_file(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt manifest in " + dir.string() + ": " + e.what());
    }
    if (!manifest.contains("format_version") ||
        manifest.at("format_version").get<int>() != kFormatVersion)
        throw std::runtime_error("checkpoint format version mismatch in " + dir.string());

    ModelConfig config = model_config_from_json(manifest.at("config"));
    LoadedCheckpoint loaded{ModelParams::zeros(config), std::nullopt};
    std::string blob = read_file(dir / "weights.bin");

    size_t expected_bytes = 0;
    std::set<std::string> seen;
    for (const auto& entry : manifest.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        if (!seen.insert(name).second)
            throw std::runtime_error("manifest lists tensor twice: " + name);
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        if (entry.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error("unsupported dtype for tensor " + name);
        if (shape != ModelParams::expected_shape(config, name))
            throw std::runtime_error("tensor shape does not match config: " + name);
        size_t offset = entry.at("byte_offset").get<size_t>();
        size_t count = numel(shape);
        if (offset != expected_bytes)
            throw std::runtime_error("tensor table offsets are not contiguous at " + name);
        expected_bytes += 4 * count;
        if (blob.size() < expected_bytes)
            throw std::runtime_error("weights.bin truncated at tensor " + name);
        loaded.params.at(name).data() = read_f32(blob, offset, count);
    }
    if (seen.size() != ModelParams::parameter_names(config).size())
        throw std::runtime_error("manifest is missing parameters");

    if (manifest.contains("optimizer")) {
        AdamState state;
        state.step = manifest.at("optimizer").at("step").get<long>();
        const auto& entries = manifest.at("optimizer").at("tensors");
        for (const std::string& pname : loaded.params.names()) {
            const std::vector<int>& shape = loaded.params.at(pname).shape();
            state.m.emplace_back();
            state.v.emplace_back();
            bool got_m = false, got_v = false;
            for (const auto& entry : entries) {
                std::string name = entry.at("name").get<std::string>();
                if (name != "opt.m." + pname && name != "opt.v." + pname) continue;
                if (entry.at("shape").get<std::vector<int>>() != shape)
                    throw std::runtime_error("optimizer tensor shape mismatch: " + name);
                size_t offset = entry.at("byte_offset").get<size_t>();
                size_t count = numel(shape);
                if (blob.size() < offset + 4 * count)
                    throw std::runtime_error("weights.bin truncated at tensor " + name);
                expected_bytes = std::max(expected_bytes, offset + 4 * count);
                auto values = read_f32(blob, offset, count);
                if (name[4] == 'm') {
                    state.m.back() = std::move(values);
                    got_m = true;
                } else {
                    state.v.back() = std::move(values);
                    got_v = true;
                }
            }
            if (!got_m || !got_v)
                throw std::runtime_error("optimizer state incomplete for " + pname);
        }
        loaded.optimizer = std::move(state);
    }

    if (blob.size() != expected_bytes)
        throw std::runtime_error("weights.bin length does not match manifest in " + dir.string());
    return loaded;
}

}  // namespace aulab
