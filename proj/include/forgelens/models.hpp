#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "json.hpp"

#include "forgelens/conv.hpp"
#include "forgelens/core/error.hpp"
#include "forgelens/fusion.hpp"
#include "forgelens/nn.hpp"
#include "forgelens/swin.hpp"

namespace forgelens {

/// Build any model from its `config_json()` description. The "arch" key
/// selects swin, resnet_lite, alexnet_lite, vgg_lite or hybrid.
template <class T>
std::unique_ptr<Model<T>> build_model(const nlohmann::json& cfg, std::uint64_t seed) {
    if (!cfg.is_object() || !cfg.contains("arch") || !cfg.at("arch").is_string())
        throw ConfigError("model config needs a string \"arch\"");
    const std::string arch = cfg.at("arch");
    try {
        if (arch == "swin") return std::make_unique<SwinModel<T>>(SwinConfig::from_json(cfg), seed);
        if (arch == "hybrid") return std::make_unique<HybridModel<T>>(HybridConfig::from_json(cfg), seed);
        if (arch == "resnet_lite" || arch == "alexnet_lite" || arch == "vgg_lite")
            return std::make_unique<ConvModel<T>>(ConvConfig::from_json(cfg), seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid model config: " + std::string(e.what()));
    }
    throw ConfigError("unknown model '" + arch + "' (expected swin, resnet_lite, alexnet_lite, vgg_lite or hybrid)");
}

/// The complete description `build_model` would produce for `cfg`, with
/// every default filled in; no weights are allocated.
inline nlohmann::json resolve_model_config(const nlohmann::json& cfg) {
    if (!cfg.is_object() || !cfg.contains("arch") || !cfg.at("arch").is_string())
        throw ConfigError("model config needs a string \"arch\"");
    const std::string arch = cfg.at("arch");
    try {
        if (arch == "swin") return SwinConfig::from_json(cfg).to_json();
        if (arch == "hybrid") return HybridConfig::from_json(cfg).to_json();
        if (arch == "resnet_lite" || arch == "alexnet_lite" || arch == "vgg_lite") return ConvConfig::from_json(cfg).to_json();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid model config: " + std::string(e.what()));
    }
    throw ConfigError("unknown model '" + arch + "' (expected swin, resnet_lite, alexnet_lite, vgg_lite or hybrid)");
}

} // namespace forgelens
