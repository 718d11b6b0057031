#include <doctest.h>

#include <set>

#include "qdetect/config.hpp"
#include "qdetect/error.hpp"

using namespace qdetect;
using namespace qdetect::config;
using nlohmann::json;

namespace {

std::string error_of(const json& doc) {
    try {
        parse_config(doc);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

void collect_keys(const json& node, const std::string& prefix, std::set<std::string>& out) {
    for (const auto& [k, v] : node.items()) {
        const std::string key = prefix.empty() ? k : prefix + "." + k;
        if (v.is_object())
            collect_keys(v, key, out);
        else
            out.insert(key);
    }
}

} // namespace

TEST_CASE("presets") {
    CHECK(preset_names() == std::vector<std::string>{"paper-1qubit", "paper-3qubit"});
    auto three = preset("paper-3qubit");
    CHECK(three.name == "paper-3qubit");
    CHECK(three.seed == 42);
    CHECK(three.dataset.count == 100'000);
    CHECK(three.dataset.image.height == 12);
    CHECK(three.dataset.image.width == 24);
    CHECK(three.dataset.image.n_ions() == 3);
    CHECK(three.vit.patch == 6);
    CHECK(three.vit.n_classes == 8);
    CHECK(three.timing.slots_per_line == 649);
    CHECK(three.timing.height == 12);
    CHECK(three.mlp.seed == 42);
    CHECK(three.dataset_label() == "3-qubit");

    auto one = preset("paper-1qubit");
    CHECK(one.dataset.count == 6'500);
    CHECK(one.dataset.image.height == 10);
    CHECK(one.vit.patch == 5);
    CHECK(one.vit.n_classes == 2);
    CHECK(one.format.str() == "16.8");

    CHECK_THROWS_AS(preset("paper-5qubit"), ConfigError);
}

TEST_CASE("unknown and mistyped keys are rejected by name") {
    CHECK(error_of({{"preset", "paper-1qubit"}, {"mlp", {{"fanin", 3}}}}).find("'mlp.fanin'") != std::string::npos);
    CHECK(error_of({{"seed", 1}, {"colour", "red"}}).find("'colour'") != std::string::npos);
    CHECK(error_of({{"seed", 1}, {"vit", {{"epochs", "ten"}}}}).find("'vit.epochs'") != std::string::npos);
    CHECK(error_of({{"seed", 1}, {"vit", {{"literal_heads", 1}}}}).find("boolean") != std::string::npos);
    CHECK(error_of({{"seed", 1}, {"mlp", {{"hidden_widths", {1.5}}}}}).find("'mlp.hidden_widths'") !=
          std::string::npos);
    CHECK(error_of({{"dataset", {{"count", 10}}}}).find("'seed'") != std::string::npos);
    CHECK_FALSE(error_of({{"seed", 1}, {"dataset", {{"count", 1}}}}).empty());
    CHECK_THROWS_AS(parse_config_text("{not json"), ConfigError);
    CHECK_THROWS_AS(parse_config(json::array()), ConfigError);
}

TEST_CASE("documents override their preset") {
    auto c = parse_config({{"preset", "paper-1qubit"}, {"seed", 7}, {"dataset", {{"count", 500}}}});
    CHECK(c.seed == 7);
    CHECK(c.mlp.seed == 7);
    CHECK(c.vit.seed == 7);
    CHECK(c.dataset.count == 500);
    CHECK(c.dataset.image.height == 10);

    auto custom = parse_config({{"seed", 3}});
    CHECK(custom.name == "custom");
    CHECK(custom.dataset.image.width == 24);
}

TEST_CASE("command-line overrides") {
    json doc = preset_document("paper-1qubit");
    apply_override(doc, "mlp.hidden_widths=8,4");
    apply_override(doc, "vit.literal_heads=true");
    apply_override(doc, "timing.line_profile=nominal");
    apply_override(doc, "dataset.bg_mean=40.5");
    apply_override(doc, "seed=9");
    auto c = parse_config(doc);
    CHECK(c.mlp.hidden_widths == std::vector<int>{8, 4});
    CHECK(c.vit.literal_heads);
    CHECK(c.timing.slots_per_line == 512);
    CHECK(c.dataset.image.bg_mean == 40.5);
    CHECK(c.seed == 9);

    CHECK_THROWS_WITH_AS(apply_override(doc, "mlp.depth=3"), doctest::Contains("'mlp.depth'"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "seed"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "seed=x"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "vit.literal_heads=yes"), ConfigError);
    apply_override(doc, "timing.slots_per_line=-4");
    CHECK_THROWS_AS(parse_config(doc), ConfigError);
}

TEST_CASE("schema covers the canonical document") {
    std::set<std::string> schema;
    for (const auto& e : config_schema()) {
        CHECK_FALSE(e.description.empty());
        CHECK(schema.insert(e.key).second);
    }
    std::set<std::string> doc_keys;
    collect_keys(to_json(preset("paper-3qubit")), "", doc_keys);
    for (const auto& k : doc_keys) CHECK_MESSAGE(schema.count(k) == 1, k);
    for (const auto& k : schema)
        if (k != "preset") CHECK_MESSAGE(doc_keys.count(k) == 1, k);
    CHECK(schema_help().find("seed (integer)") != std::string::npos);
}

TEST_CASE("canonical round trip and content hash") {
    auto c = preset("paper-1qubit");
    auto doc = to_json(c);
    CHECK(to_json(parse_config(doc)) == doc);
    CHECK(content_hash("") == "cbf29ce484222325");
    CHECK(content_hash("a") == "af63dc4c8601ec8c");
    CHECK(content_hash(doc.dump()) == content_hash(to_json(preset("paper-1qubit")).dump()));
    CHECK(content_hash(doc.dump()) != content_hash(to_json(preset("paper-3qubit")).dump()));
}
