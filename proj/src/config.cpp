#include "qdetect/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>

#include "qdetect/error.hpp"

namespace qdetect::config {

using nlohmann::json;

namespace {

struct Field {
    SchemaEntry entry;
    std::function<json(const RunConfig&)> get;
    std::function<void(RunConfig&, const json&)> set;
};

template <typename T, typename Obj>
Field field(std::string key, std::string type, std::string desc, std::function<Obj&(RunConfig&)> obj,
            T Obj::*member) {
    return {{std::move(key), std::move(type), std::move(desc)},
            [obj, member](const RunConfig& c) { return json(obj(const_cast<RunConfig&>(c)).*member); },
            [obj, member](RunConfig& c, const json& v) { obj(c).*member = v.get<T>(); }};
}

std::vector<Field> build_fields() {
    std::function<RunConfig&(RunConfig&)> root = [](RunConfig& c) -> RunConfig& { return c; };
    std::function<DatasetSection&(RunConfig&)> ds = [](RunConfig& c) -> DatasetSection& { return c.dataset; };
    std::function<ImageConfig&(RunConfig&)> img = [](RunConfig& c) -> ImageConfig& { return c.dataset.image; };
    std::function<ThresholdSection&(RunConfig&)> th = [](RunConfig& c) -> ThresholdSection& { return c.threshold; };
    std::function<polymlp::PolyMlpConfig&(RunConfig&)> mlp = [](RunConfig& c) -> polymlp::PolyMlpConfig& {
        return c.mlp;
    };
    std::function<vit::VitConfig&(RunConfig&)> vt = [](RunConfig& c) -> vit::VitConfig& { return c.vit; };
    std::function<timing::TimingConfig&(RunConfig&)> tm = [](RunConfig& c) -> timing::TimingConfig& {
        return c.timing;
    };

    std::vector<Field> f;
    f.push_back(field<std::uint64_t>("seed", "integer", "master seed of the dataset and both trainers", root,
                                     &RunConfig::seed));

    f.push_back(field<int>("dataset.ions", "integer", "ions in the chain (qubits)", ds, &DatasetSection::ions));
    f.push_back(field<std::size_t>("dataset.count", "integer", "images generated (train + test)", ds,
                                   &DatasetSection::count));
    f.push_back(field<double>("dataset.split_ratio", "number", "fraction of images in the training split", ds,
                              &DatasetSection::split_ratio));
    f.push_back(field<int>("dataset.ion_spacing", "integer", "columns between neighbouring ions", ds,
                           &DatasetSection::ion_spacing));
    f.push_back(field<int>("dataset.height", "integer", "image rows", img, &ImageConfig::height));
    f.push_back(field<int>("dataset.width", "integer", "image columns", img, &ImageConfig::width));
    f.push_back(field<double>("dataset.psf_sigma", "number", "Gaussian PSF width in pixels", img,
                              &ImageConfig::psf_sigma));
    f.push_back(field<double>("dataset.psf_amplitude", "number", "PSF peak of a bright ion in counts", img,
                              &ImageConfig::psf_amplitude));
    f.push_back(field<double>("dataset.poisson_lambda", "number", "mean of the per-pixel shot-noise draw", img,
                              &ImageConfig::poisson_lambda));
    f.push_back(field<double>("dataset.bg_mean", "number", "background mean in counts", img,
                              &ImageConfig::bg_mean));
    f.push_back(field<double>("dataset.bg_sigma", "number", "background standard deviation in counts", img,
                              &ImageConfig::bg_sigma));
    f.push_back(field<int>("dataset.pixel_depth", "integer", "bits per stored pixel", img,
                           &ImageConfig::pixel_depth));

    f.push_back(field<int>("threshold.roi_width", "integer", "ROI columns per ion", th, &ThresholdSection::roi_width));
    f.push_back(field<int>("threshold.roi_height", "integer", "ROI rows per ion", th, &ThresholdSection::roi_height));

    using M = polymlp::PolyMlpConfig;
    f.push_back(field<std::vector<int>>("mlp.hidden_widths", "integer-list", "hidden layer widths", mlp,
                                        &M::hidden_widths));
    f.push_back(field<int>("mlp.output_width", "integer", "output neurons, 0 for one per class", mlp,
                           &M::output_width));
    f.push_back(field<int>("mlp.fan_in", "integer", "inputs per sub-neuron (F)", mlp, &M::fan_in));
    f.push_back(field<int>("mlp.activation_bits", "integer", "bits per activation code (beta)", mlp,
                           &M::activation_bits));
    f.push_back(field<int>("mlp.poly_degree", "integer", "polynomial degree (D)", mlp, &M::poly_degree));
    f.push_back(field<int>("mlp.subneurons", "integer", "sub-neurons per neuron (A)", mlp, &M::subneurons));
    f.push_back(field<int>("mlp.head_sub_bits", "integer", "output sub-neuron code bits, 0 for beta+1", mlp,
                           &M::head_sub_bits));
    f.push_back(field<double>("mlp.learning_rate", "number", "AdamW learning rate", mlp, &M::learning_rate));
    f.push_back(field<double>("mlp.weight_decay", "number", "AdamW decoupled weight decay", mlp, &M::weight_decay));
    f.push_back(field<double>("mlp.adam_beta1", "number", "AdamW first-moment decay", mlp, &M::adam_beta1));
    f.push_back(field<double>("mlp.adam_beta2", "number", "AdamW second-moment decay", mlp, &M::adam_beta2));
    f.push_back(field<double>("mlp.adam_eps", "number", "AdamW denominator epsilon", mlp, &M::adam_eps));
    f.push_back(field<int>("mlp.epochs", "integer", "training epochs", mlp, &M::epochs));
    f.push_back(field<int>("mlp.batch_size", "integer", "minibatch size", mlp, &M::batch_size));
    f.push_back(field<double>("mlp.logit_scale", "number", "logit multiplier inside the loss", mlp, &M::logit_scale));
    f.push_back(field<double>("mlp.input_quantile", "number", "pixel quantile bounding the input code range", mlp,
                              &M::input_quantile));

    using V = vit::VitConfig;
    f.push_back(field<int>("vit.patch", "integer", "patch side in pixels", vt, &V::patch));
    f.push_back(field<int>("vit.latent_dim", "integer", "latent width (D)", vt, &V::latent_dim));
    f.push_back(field<int>("vit.n_heads", "integer", "attention heads", vt, &V::n_heads));
    f.push_back(field<int>("vit.n_layers", "integer", "transformer blocks", vt, &V::n_layers));
    f.push_back(field<bool>("vit.literal_heads", "boolean", "full-width heads summed instead of split heads", vt,
                            &V::literal_heads));
    f.push_back(field<double>("vit.learning_rate", "number", "SGD learning rate", vt, &V::learning_rate));
    f.push_back(field<double>("vit.momentum", "number", "SGD momentum", vt, &V::momentum));
    f.push_back(field<int>("vit.batch_size", "integer", "minibatch size", vt, &V::batch_size));
    f.push_back(field<int>("vit.epochs", "integer", "training epochs", vt, &V::epochs));
    f.push_back(field<double>("vit.bn_eps", "number", "batch-norm epsilon", vt, &V::bn_eps));
    f.push_back(field<double>("vit.bn_momentum", "number", "batch-norm running-stat momentum", vt, &V::bn_momentum));

    f.push_back({{"fixed.format", "string", "fixed-point format T.F of the quantized ViT"},
                 [](const RunConfig& c) { return json(c.format.str()); },
                 [](RunConfig& c, const json& v) { c.format = fixed::FixedFormat::parse(v.get<std::string>()); }});

    using T = timing::TimingConfig;
    f.push_back(field<std::uint64_t>("timing.pixel_clock_hz", "integer", "camera pixel clock", tm,
                                     &T::pixel_clock_hz));
    f.push_back(field<std::string>("timing.line_profile", "string", "line timing profile: nominal or calibrated", tm,
                                   &T::line_profile));
    f.push_back(field<int>("timing.slots_per_line", "integer", "pixel slots per line, 0 for the line profile's", root,
                           &RunConfig::slots_per_line));
    f.push_back(field<double>("timing.exposure_s", "number", "exposure time in seconds", tm, &T::exposure_s));
    f.push_back(field<double>("timing.frame_transfer_s", "number", "frame transfer time in seconds", tm,
                              &T::frame_transfer_s));
    f.push_back(field<std::uint64_t>("timing.fpga_clock_hz", "integer", "FPGA clock", tm, &T::fpga_clock_hz));
    f.push_back(field<std::uint64_t>("timing.fifo_stall_cycles", "integer", "FPGA cycles of FIFO stall", tm,
                                     &T::fifo_stall_cycles));
    return f;
}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = build_fields();
    return f;
}

const Field* find_field(std::string_view key) {
    for (const auto& f : fields())
        if (f.entry.key == key) return &f;
    return nullptr;
}

bool type_matches(const std::string& type, const json& v) {
    if (type == "integer") return v.is_number_integer();
    if (type == "number") return v.is_number();
    if (type == "boolean") return v.is_boolean();
    if (type == "string") return v.is_string();
    if (type == "integer-list") {
        if (!v.is_array()) return false;
        for (const auto& e : v)
            if (!e.is_number_integer()) return false;
        return true;
    }
    return false;
}

// Flattens nested objects into dotted keys; arrays and scalars are leaves.
void flatten(const json& doc, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it->is_object())
            flatten(*it, key, out);
        else
            out.emplace_back(key, *it);
    }
}

void finalize(RunConfig& c) {
    auto& img = c.dataset.image;
    img.ion_centers = default_ion_centers(img.height, img.width, c.dataset.ions, c.dataset.ion_spacing);
    img.validate();
    if (c.dataset.count < 2) throw ConfigError("dataset.count must be at least 2");
    if (!(c.dataset.split_ratio > 0.0 && c.dataset.split_ratio < 1.0))
        throw ConfigError("dataset.split_ratio must lie in (0, 1)");

    c.mlp.seed = c.seed;
    c.mlp.validate(img.height * img.width, 1 << c.dataset.ions);

    c.vit.height = img.height;
    c.vit.width = img.width;
    c.vit.n_classes = 1 << c.dataset.ions;
    c.vit.seed = c.seed;
    c.vit.validate();

    c.format.validate();

    if (c.slots_per_line < 0) throw ConfigError("timing.slots_per_line must not be negative");
    c.timing.slots_per_line =
        c.slots_per_line > 0 ? c.slots_per_line : timing::line_profile_slots(c.timing.line_profile);
    c.timing.height = img.height;
    c.timing.width = img.width;
    c.timing.validate();
}

json base_document(std::string_view name) {
    RunConfig c;
    c.seed = 42;
    c.timing.line_profile = "calibrated";
    if (name == "paper-3qubit") {
        c.dataset.ions = 3;
        c.dataset.count = 100'000;
        c.dataset.image = ImageConfig::three_qubit();
        c.vit = vit::VitConfig::for_images(12, 24, 3);
    } else if (name == "paper-1qubit") {
        c.dataset.ions = 1;
        c.dataset.count = 6'500;
        c.dataset.image = ImageConfig::one_qubit();
        c.vit = vit::VitConfig::for_images(10, 10, 1);
    } else {
        throw ConfigError("unknown preset '" + std::string(name) + "'");
    }
    c.name = std::string(name);
    finalize(c);
    return to_json(c);
}

void set_path(json& doc, const std::string& dotted, json value) {
    json* node = &doc;
    std::size_t start = 0;
    for (;;) {
        auto dot = dotted.find('.', start);
        std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (dot == std::string::npos) {
            (*node)[part] = std::move(value);
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
    T v{};
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size())
        throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(text) + "'");
    return v;
}

} // namespace

const std::vector<SchemaEntry>& config_schema() {
    static const std::vector<SchemaEntry> s = [] {
        std::vector<SchemaEntry> out{{"preset", "string", "preset whose values the document overrides"}};
        for (const auto& f : fields()) out.push_back(f.entry);
        return out;
    }();
    return s;
}

std::string schema_help() {
    std::string out;
    for (const auto& e : config_schema()) out += "  " + e.key + " (" + e.type + "): " + e.description + "\n";
    return out;
}

std::vector<std::string> preset_names() { return {"paper-1qubit", "paper-3qubit"}; }

json preset_document(std::string_view name) {
    json doc = base_document(name);
    doc["preset"] = std::string(name);
    return doc;
}

RunConfig preset(std::string_view name) { return parse_config(preset_document(name)); }

RunConfig parse_config(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
    std::string name = "custom";
    json base;
    if (doc.contains("preset")) {
        if (!doc["preset"].is_string()) throw ConfigError("config key 'preset' must be a string");
        name = doc["preset"].get<std::string>();
        base = base_document(name);
    } else {
        if (!doc.contains("seed")) throw ConfigError("config key 'seed' is required without a preset");
        base = base_document("paper-3qubit");
    }

    std::vector<std::pair<std::string, json>> entries;
    flatten(doc, "", entries);
    for (const auto& [key, value] : entries) {
        if (key == "preset") continue;
        const Field* f = find_field(key);
        if (!f) throw ConfigError("unknown config key '" + key + "'");
        if (!type_matches(f->entry.type, value))
            throw ConfigError("config key '" + key + "' must be of type " + f->entry.type);
    }

    RunConfig c;
    std::vector<std::pair<std::string, json>> base_entries;
    flatten(base, "", base_entries);
    for (const auto& [key, value] : base_entries) find_field(key)->set(c, value);
    for (const auto& [key, value] : entries)
        if (key != "preset") find_field(key)->set(c, value);
    c.name = name;
    finalize(c);
    return c;
}

RunConfig parse_config_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(doc);
}

void apply_override(json& doc, std::string_view assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' lacks '='");
    std::string key(assignment.substr(0, eq));
    std::string_view text = assignment.substr(eq + 1);
    json value;
    if (key == "preset") {
        value = std::string(text);
    } else {
        const Field* f = find_field(key);
        if (!f) throw ConfigError("unknown config key '" + key + "'");
        const auto& type = f->entry.type;
        if (type == "integer") {
            if (!text.empty() && text.front() == '-')
                value = parse_number<std::int64_t>(key, text);
            else
                value = parse_number<std::uint64_t>(key, text);
        } else if (type == "number") {
            value = parse_number<double>(key, text);
        } else if (type == "boolean") {
            if (text == "true")
                value = true;
            else if (text == "false")
                value = false;
            else
                throw ConfigError("config key '" + key + "' expects true or false");
        } else if (type == "string") {
            value = std::string(text);
        } else {
            value = json::array();
            std::size_t start = 0;
            while (start <= text.size()) {
                auto comma = text.find(',', start);
                auto item = text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
                value.push_back(parse_number<int>(key, item));
                if (comma == std::string_view::npos) break;
                start = comma + 1;
            }
        }
    }
    set_path(doc, key, std::move(value));
}

json to_json(const RunConfig& cfg) {
    json doc = json::object();
    for (const auto& f : fields()) set_path(doc, f.entry.key, f.get(cfg));
    return doc;
}

std::string content_hash(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace qdetect::config
