#pragma once

// Versioned binary checkpoint container.
//
//   "FLCKPT01" | u32 LE header length | JSON header | f32 LE payload | u32 LE crc32
//
// The crc32 covers every byte before it. The header holds the model
// description, an index of named tensors {name, role, shape, offset} into the
// payload, and optionally the train config and TrainState.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <zlib.h>

#include "json.hpp"

#include "forgelens/core/error.hpp"
#include "forgelens/core/hash.hpp"
#include "forgelens/image/io.hpp"
#include "forgelens/metrics.hpp"
#include "forgelens/models.hpp"
#include "forgelens/train.hpp"

namespace forgelens {

inline constexpr char kCheckpointMagic[8] = {'F', 'L', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

namespace ckpt_detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = crc32(c, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

class PayloadWriter {
public:
    template <class T>
    void add(const std::string& name, const std::string& role, const Shape& shape, std::span<const T> values) {
        index_.push_back({{"name", name}, {"role", role}, {"shape", shape}, {"offset", payload_.size()}});
        for (T v : values) payload_.push_back(static_cast<float>(v));
    }
    const nlohmann::json& index() const { return index_; }
    const std::vector<float>& payload() const { return payload_; }

private:
    nlohmann::json index_ = nlohmann::json::array();
    std::vector<float> payload_;
};

inline nlohmann::json history_to_json(const MetricsHistory& h) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : h.rows()) rows.push_back({r.epoch, to_string(r.split), r.mean_loss, r.accuracy});
    return {{"run_id", h.run_id}, {"config_hash", h.config_hash}, {"rows", rows}};
}

inline MetricsHistory history_from_json(const nlohmann::json& j) {
    MetricsHistory h;
    h.run_id = j.at("run_id");
    h.config_hash = j.at("config_hash");
    for (const auto& r : j.at("rows"))
        h.append({r.at(0).get<std::size_t>(), parse_split(r.at(1).get<std::string>()), r.at(2).get<double>(), r.at(3).get<double>()});
    return h;
}

} // namespace ckpt_detail

/// Serialize a model, optionally with its train config and TrainState.
template <class T>
std::vector<std::uint8_t> encode_checkpoint(const Model<T>& model, const TrainConfig* train, const TrainState<T>* state,
                                            const std::string& data_hash = "") {
    const auto& ps = model.parameters();
    ckpt_detail::PayloadWriter w;
    for (const auto& p : ps.params()) w.add<T>(p.name, "param", p.tensor.shape(), p.tensor.values());
    for (const auto& b : ps.buffers()) w.add<T>(b.name, "buffer", b.tensor.shape(), b.tensor.values());
    nlohmann::json st = nullptr;
    if (state) {
        const auto& opt = state->optimizer;
        for (std::size_t i = 0; i < ps.params().size(); ++i) {
            const auto& p = ps.params()[i];
            if (!opt.first_moments()[i].empty())
                w.add<T>(p.name, "first_moment", p.tensor.shape(), std::span<const T>(opt.first_moments()[i]));
            w.add<T>(p.name, "second_moment", p.tensor.shape(), std::span<const T>(opt.second_moments()[i]));
        }
        st = {{"epoch", state->epoch},
              {"freeze_mask", state->freeze_mask},
              {"optimizer", to_string(opt.config().kind)},
              {"optimizer_steps", opt.steps()},
              {"history", ckpt_detail::history_to_json(state->history)}};
    }
    const nlohmann::json header{{"format", "forgelens-checkpoint"},
                                {"version", kCheckpointVersion},
                                {"model", model.config_json()},
                                {"groups", ps.groups()},
                                {"train_config", train ? train->to_json() : nlohmann::json(nullptr)},
                                {"state", st},
                                {"data_manifest_hash", data_hash},
                                {"tensors", w.index()}};
    const std::string hs = header.dump();
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    ckpt_detail::put_u32(out, static_cast<std::uint32_t>(hs.size()));
    out.insert(out.end(), hs.begin(), hs.end());
    out.reserve(out.size() + 4 * w.payload().size() + 4);
    for (float v : w.payload()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        ckpt_detail::put_u32(out, bits);
    }
    ckpt_detail::put_u32(out, ckpt_detail::crc32_of(out.data(), out.size()));
    return out;
}

template <class T>
struct LoadedCheckpoint {
    nlohmann::json header;
    std::unique_ptr<Model<T>> model;
    std::optional<TrainConfig> train;
    std::unique_ptr<TrainState<T>> state;
    std::string data_hash;
    std::string id;  // hex hash of the file bytes
};

/// Rebuilds the model from the header and restores every tensor. Any
/// structural disagreement raises IntegrityError.
template <class T>
LoadedCheckpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    using nlohmann::json;
    if (bytes.size() < 16 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin()))
        throw IntegrityError("not a checkpoint (bad magic)");
    const std::uint32_t stored_crc = ckpt_detail::get_u32(bytes.data() + bytes.size() - 4);
    if (ckpt_detail::crc32_of(bytes.data(), bytes.size() - 4) != stored_crc) throw IntegrityError("checkpoint crc32 mismatch");
    const std::size_t hlen = ckpt_detail::get_u32(bytes.data() + 8);
    if (12 + hlen + 4 > bytes.size()) throw IntegrityError("checkpoint header truncated");
    const std::size_t payload_bytes = bytes.size() - 12 - hlen - 4;
    if (payload_bytes % 4 != 0) throw IntegrityError("checkpoint payload is not a whole number of floats");
    const std::uint8_t* payload = bytes.data() + 12 + hlen;
    const std::size_t payload_len = payload_bytes / 4;

    LoadedCheckpoint<T> out;
    try {
        out.header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(hlen));
        if (out.header.at("format") != "forgelens-checkpoint" || out.header.at("version") != kCheckpointVersion)
            throw IntegrityError("unsupported checkpoint format or version");
        out.model = build_model<T>(out.header.at("model"), 0);
        if (!out.header.at("train_config").is_null()) out.train = TrainConfig::from_json(out.header.at("train_config"));
        out.data_hash = out.header.at("data_manifest_hash");

        std::map<std::pair<std::string, std::string>, const json*> index;
        for (const auto& e : out.header.at("tensors")) index[{e.at("role"), e.at("name")}] = &e;
        std::size_t used = 0;
        auto read_into = [&](const std::string& role, const std::string& name, const Shape& shape, std::span<T> dst) {
            const auto it = index.find({role, name});
            if (it == index.end()) throw IntegrityError("checkpoint lacks " + role + " '" + name + "'");
            const json& e = *it->second;
            if (e.at("shape").get<Shape>() != shape)
                throw IntegrityError(role + " '" + name + "' has shape " + shape_str(e.at("shape").get<Shape>()) +
                                     ", model expects " + shape_str(shape));
            const std::size_t off = e.at("offset");
            if (off + dst.size() > payload_len) throw IntegrityError(role + " '" + name + "' runs past the payload");
            for (std::size_t i = 0; i < dst.size(); ++i) {
                const std::uint32_t bits = ckpt_detail::get_u32(payload + 4 * (off + i));
                float f;
                std::memcpy(&f, &bits, 4);
                dst[i] = static_cast<T>(f);
            }
            ++used;
        };
        const auto& ps = out.model->parameters();
        if (out.header.at("groups").template get<std::vector<std::string>>() != ps.groups())
            throw IntegrityError("checkpoint parameter groups differ from the rebuilt model");
        for (const auto& p : ps.params()) {
            Tensor<T> t = p.tensor;
            read_into("param", p.name, t.shape(), t.mutable_values());
        }
        for (const auto& b : ps.buffers()) {
            Tensor<T> t = b.tensor;
            read_into("buffer", b.name, t.shape(), t.mutable_values());
        }
        const json& st = out.header.at("state");
        if (!st.is_null()) {
            if (!out.train) throw IntegrityError("checkpoint has a train state but no train config");
            out.state = std::make_unique<TrainState<T>>(out.train->optimizer_config(), ps);
            auto& opt = out.state->optimizer;
            if (st.at("optimizer") != to_string(opt.config().kind)) throw IntegrityError("checkpoint optimizer kind mismatch");
            for (std::size_t i = 0; i < ps.params().size(); ++i) {
                const auto& p = ps.params()[i];
                if (!opt.first_moments()[i].empty())
                    read_into("first_moment", p.name, p.tensor.shape(), std::span<T>(opt.first_moments()[i]));
                read_into("second_moment", p.name, p.tensor.shape(), std::span<T>(opt.second_moments()[i]));
            }
            opt.steps() = st.at("optimizer_steps").template get<std::vector<std::uint64_t>>();
            if (opt.steps().size() != ps.params().size()) throw IntegrityError("optimizer step counts do not match parameters");
            out.state->epoch = st.at("epoch");
            out.state->freeze_mask = st.at("freeze_mask").template get<std::vector<bool>>();
            out.state->history = ckpt_detail::history_from_json(st.at("history"));
        }
        if (used != index.size()) throw IntegrityError("checkpoint holds tensors the model does not use");
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw IntegrityError(std::string("checkpoint describes an invalid configuration: ") + e.what());
    }
    char id[17];
    std::snprintf(id, sizeof id, "%016llx",
                  static_cast<unsigned long long>(fnv1a64({reinterpret_cast<const char*>(bytes.data()), bytes.size()})));
    out.id = id;
    return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const TrainConfig* train,
                     const TrainState<T>* state, const std::string& data_hash = "") {
    write_file_bytes(path, encode_checkpoint(model, train, state, data_hash));
}

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint<T>(read_file_bytes(path));
}

} // namespace forgelens
