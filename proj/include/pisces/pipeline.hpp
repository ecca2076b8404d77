#pragma once

// The staged pipeline behind the `pisces` command. Every stage reads the
// previous stage's artifacts from the work directory, checks the digests they
// were recorded against, and writes its own artifacts atomically. Artifacts
// are byte-identical across re-runs with the same inputs and seed; the files
// under logs/ carry wall-clock timings and are the only exception.
//
//   forge/      model.pstc spec.json ground_truth.json neutral.json sae_text.json
//               corpora/<c>.json probes/<c>.json validation_probes/<c>.json
//   sae/        layer_<l>.sae suite.json
//   features/   <c>.json
//   curation/   audit.json
//   erase/<c>/  model.pstc plan.json report.json
//   eval/       <c>.json
//   sweep/      <c>.json <c>.txt
//   report.json report.txt

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "pisces/curation.hpp"
#include "pisces/discovery.hpp"
#include "pisces/eraser.hpp"
#include "pisces/evaluation.hpp"
#include "pisces/forge.hpp"
#include "pisces/sae.hpp"
#include "pisces/sweep.hpp"

namespace pisces {

namespace fs = std::filesystem;

struct run_config {
    fs::path workdir = "pisces_work";
    std::string concept_id;
    std::uint64_t seed = 0;
    std::string forge_spec;  // optional JSON spec file; empty uses the default fixture

    // forge
    std::size_t corpus_sequences = 200;
    std::size_t probes_per_concept = 50;
    std::size_t neutral_sequences = 400;
    std::size_t sae_text_sequences = 400;
    std::size_t sae_heldout_sequences = 50;

    // train-sae
    sae_train_config sae;

    // discover
    std::size_t alpha = 4;
    std::size_t top_t = 0;  // 0 scales with the vocabulary
    double cosine_threshold = 0.7;
    std::vector<std::string> seeds;

    // erase
    erase_params erase;
    double prune_limit = 0.05;  // retain-accuracy drop that prunes a feature; < 0 disables pruning
    bool headless = false;

    // sweep
    sweep_grid grid;

    // eval
    relearn_config relearn;
    std::size_t relearn_eval_every = 20;

    // curate
    int port = 8765;
    std::string ui_dir;
};

inline void to_json(nlohmann::json& j, const run_config& c) {
    j = {{"workdir", c.workdir.string()},
         {"concept", c.concept_id},
         {"seed", c.seed},
         {"forge_spec", c.forge_spec},
         {"corpus_sequences", c.corpus_sequences},
         {"probes_per_concept", c.probes_per_concept},
         {"neutral_sequences", c.neutral_sequences},
         {"sae_text_sequences", c.sae_text_sequences},
         {"sae_heldout_sequences", c.sae_heldout_sequences},
         {"sae_steps", c.sae.steps},
         {"sae_l1", c.sae.l1_coefficient},
         {"sae_lr", c.sae.learning_rate},
         {"sae_batch_size", c.sae.batch_size},
         {"sae_features", c.sae.n_features},
         {"alpha", c.alpha},
         {"top_t", c.top_t},
         {"cosine_threshold", c.cosine_threshold},
         {"seeds", c.seeds},
         {"tau", c.erase.tau},
         {"mu", c.erase.mu},
         {"mode", to_string(c.erase.mode)},
         {"prune_limit", c.prune_limit},
         {"headless", c.headless},
         {"tau_grid", c.grid.tau},
         {"mu_grid", c.grid.mu},
         {"relearn_steps", c.relearn.steps},
         {"relearn_lr", c.relearn.learning_rate},
         {"relearn_batch_size", c.relearn.batch_size},
         {"relearn_trainable", c.relearn.trainable == trainable_params::all ? "all" : "mlp_only"},
         {"relearn_eval_every", c.relearn_eval_every},
         {"port", c.port},
         {"ui_dir", c.ui_dir}};
}

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') out.push_back(cur), cur.clear();
        else cur.push_back(ch);
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::vector<double> number_list(const nlohmann::json& v, const std::string& key) {
    std::vector<double> out;
    if (v.is_array()) {
        for (const auto& x : v) out.push_back(x.get<double>());
    } else if (v.is_number()) {
        out.push_back(v.get<double>());
    } else {
        for (const auto& item : split_list(v.get<std::string>())) {
            try {
                std::size_t used = 0;
                const auto t = trim(item);
                out.push_back(std::stod(t, &used));
                if (used != t.size()) throw std::invalid_argument(t);
            } catch (const std::exception&) {
                throw validation_error("config '" + key + "': '" + item + "' is not a number");
            }
        }
    }
    return out;
}

inline std::vector<std::string> string_list(const nlohmann::json& v) {
    std::vector<std::string> out;
    if (v.is_array()) {
        for (const auto& x : v) out.push_back(x.is_string() ? x.get<std::string>() : x.dump());
    } else if (v.is_string()) {
        for (const auto& item : split_list(v.get<std::string>())) {
            if (!trim(item).empty()) out.push_back(item);
        }
    } else {
        out.push_back(v.dump());
    }
    return out;
}

} // namespace detail

/// Applies a JSON object of overrides; unknown keys are rejected.
inline void apply_config(run_config& c, const nlohmann::json& j) {
    if (!j.is_object()) throw validation_error("config must be a JSON object or key=value lines");
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "workdir") c.workdir = v.get<std::string>();
            else if (key == "concept") c.concept_id = v.get<std::string>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "forge_spec") c.forge_spec = v.get<std::string>();
            else if (key == "corpus_sequences") c.corpus_sequences = v.get<std::size_t>();
            else if (key == "probes_per_concept") c.probes_per_concept = v.get<std::size_t>();
            else if (key == "neutral_sequences") c.neutral_sequences = v.get<std::size_t>();
            else if (key == "sae_text_sequences") c.sae_text_sequences = v.get<std::size_t>();
            else if (key == "sae_heldout_sequences") c.sae_heldout_sequences = v.get<std::size_t>();
            else if (key == "sae_steps") c.sae.steps = v.get<std::size_t>();
            else if (key == "sae_l1") c.sae.l1_coefficient = v.get<double>();
            else if (key == "sae_lr") c.sae.learning_rate = v.get<double>();
            else if (key == "sae_batch_size") c.sae.batch_size = v.get<std::size_t>();
            else if (key == "sae_features") c.sae.n_features = v.get<std::size_t>();
            else if (key == "alpha") c.alpha = v.get<std::size_t>();
            else if (key == "top_t") c.top_t = v.get<std::size_t>();
            else if (key == "cosine_threshold") c.cosine_threshold = v.get<double>();
            else if (key == "seeds") c.seeds = detail::string_list(v);
            else if (key == "tau") c.erase.tau = v.get<double>();
            else if (key == "mu") c.erase.mu = v.get<double>();
            else if (key == "mode") c.erase.mode = parse_edit_mode(v.get<std::string>());
            else if (key == "prune_limit") c.prune_limit = v.get<double>();
            else if (key == "headless") c.headless = v.get<bool>();
            else if (key == "tau_grid") c.grid.tau = detail::number_list(v, key);
            else if (key == "mu_grid") c.grid.mu = detail::number_list(v, key);
            else if (key == "relearn_steps") c.relearn.steps = v.get<std::size_t>();
            else if (key == "relearn_lr") c.relearn.learning_rate = v.get<double>();
            else if (key == "relearn_batch_size") c.relearn.batch_size = v.get<std::size_t>();
            else if (key == "relearn_trainable") {
                const auto s = v.get<std::string>();
                if (s == "all") c.relearn.trainable = trainable_params::all;
                else if (s == "mlp_only") c.relearn.trainable = trainable_params::mlp_only;
                else throw validation_error("must be 'all' or 'mlp_only'");
            } else if (key == "relearn_eval_every") c.relearn_eval_every = v.get<std::size_t>();
            else if (key == "port") c.port = v.get<int>();
            else if (key == "ui_dir") c.ui_dir = v.get<std::string>();
            else throw validation_error("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw validation_error("config key '" + key + "' has the wrong type: " + e.what());
        } catch (const validation_error& e) {
            const std::string msg = e.what();
            if (msg.rfind("unknown config key", 0) == 0 || msg.rfind("config", 0) == 0) throw;
            throw validation_error("config key '" + key + "': " + msg);
        }
    }
}

/// A config file is either one JSON object or `key = value` lines (`#`
/// comments). Values parse as JSON when they can and as strings otherwise.
inline nlohmann::json parse_config_text(const std::string& text) {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        auto j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded()) throw validation_error("config: malformed JSON");
        return j;
    }
    nlohmann::json j = nlohmann::json::object();
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw validation_error("config line " + std::to_string(lineno) + ": expected key=value");
        const auto key = detail::trim(t.substr(0, eq));
        const auto raw = t.substr(eq + 1);
        const auto value = detail::trim(raw);
        auto parsed = nlohmann::json::parse(value, nullptr, false);
        // Seed lists keep their raw spelling: leading spaces are part of token text.
        if (key == "seeds") j[key] = raw.empty() || raw[0] != ' ' ? raw : raw.substr(1);
        else j[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
    }
    return j;
}

inline nlohmann::json load_config_file(const fs::path& path) {
    if (!fs::exists(path)) throw io_error("config file '" + path.string() + "' does not exist");
    return parse_config_text(read_file_text(path));
}

/// Paths inside one work directory.
struct workspace {
    fs::path root;

    fs::path forge_dir() const { return root / "forge"; }
    fs::path model() const { return forge_dir() / "model.pstc"; }
    fs::path spec() const { return forge_dir() / "spec.json"; }
    fs::path truth() const { return forge_dir() / "ground_truth.json"; }
    fs::path neutral() const { return forge_dir() / "neutral.json"; }
    fs::path sae_text() const { return forge_dir() / "sae_text.json"; }
    fs::path corpora(const std::string& c) const { return forge_dir() / "corpora" / (c + ".json"); }
    fs::path probes(const std::string& c) const { return forge_dir() / "probes" / (c + ".json"); }
    fs::path validation_probes(const std::string& c) const { return forge_dir() / "validation_probes" / (c + ".json"); }
    fs::path sae_layer(std::size_t l) const { return root / "sae" / ("layer_" + std::to_string(l) + ".sae"); }
    fs::path sae_manifest() const { return root / "sae" / "suite.json"; }
    fs::path features(const std::string& c) const { return root / "features" / (c + ".json"); }
    fs::path audit() const { return root / "curation" / "audit.json"; }
    fs::path erase_dir(const std::string& c) const { return root / "erase" / c; }
    fs::path erased_model(const std::string& c) const { return erase_dir(c) / "model.pstc"; }
    fs::path plan(const std::string& c) const { return erase_dir(c) / "plan.json"; }
    fs::path erase_report(const std::string& c) const { return erase_dir(c) / "report.json"; }
    fs::path eval(const std::string& c) const { return root / "eval" / (c + ".json"); }
    fs::path sweep(const std::string& c) const { return root / "sweep" / (c + ".json"); }
    fs::path sweep_table(const std::string& c) const { return root / "sweep" / (c + ".txt"); }
    fs::path report() const { return root / "report.json"; }
    fs::path report_table() const { return root / "report.txt"; }
    fs::path log(const std::string& cmd) const { return root / "logs" / (cmd + ".json"); }
};

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path, const std::string& what) {
    if (!fs::exists(path)) throw precondition_error("missing " + what + " (" + path.string() + ")");
    auto j = nlohmann::json::parse(read_file_text(path), nullptr, false);
    if (j.is_discarded()) throw io_error(what + " at " + path.string() + " is not valid JSON");
    return j;
}

/// Loads an artifact and checks its schema tag.
template <typename T>
T read_artifact(const fs::path& path, const std::string& what, const std::string& kind = "") {
    const auto j = read_json(path, what);
    if (!kind.empty()) check_schema(j, kind);
    return j.get<T>();
}

namespace detail {

inline nlohmann::json tagged(const std::string& kind, nlohmann::json body) {
    body["schema"] = schema_tag(kind);
    return body;
}

inline void require_concept(const run_config& c, const std::string& cmd) {
    if (c.concept_id.empty()) throw validation_error(cmd + ": --concept is required");
}

inline nlohmann::json probe_suite_json(const probe_suite& ps) {
    return tagged("probe_suite", {{"efficacy", ps.efficacy}, {"similar_domain", ps.similar_domain}, {"unrelated", ps.unrelated}});
}

inline probe_suite probe_suite_from(const nlohmann::json& j) {
    check_schema(j, "probe_suite");
    probe_suite ps;
    ps.efficacy = j.at("efficacy").get<probe_set>();
    ps.similar_domain = j.at("similar_domain").get<std::vector<probe_set>>();
    ps.unrelated = j.at("unrelated").get<std::vector<probe_set>>();
    return ps;
}

inline corpus corpus_from(const nlohmann::json& j, const std::string& field = "sequences") {
    return j.at(field).get<corpus>();
}

} // namespace detail

/// Everything a stage after forge needs, loaded and digest-checked.
struct loaded_fixture {
    forge_spec spec;
    model_weights model;
    std::string model_sha256;
};

inline loaded_fixture load_fixture(const workspace& ws) {
    loaded_fixture f;
    f.spec = read_artifact<forge_spec>(ws.spec(), "forge spec; run `pisces forge` first", "forge_spec");
    if (!fs::exists(ws.model())) throw precondition_error("missing model " + ws.model().string() + "; run `pisces forge` first");
    f.model = load_weights(ws.model());
    f.model_sha256 = model_digest(f.model);
    const auto truth = read_json(ws.truth(), "ground truth; run `pisces forge` first");
    if (truth.value("model_sha256", std::string()) != f.model_sha256) {
        throw precondition_error("digest mismatch: " + ws.model().string() + " is not the model forge recorded; re-run `pisces forge`");
    }
    return f;
}

inline sae_suite load_suite(const workspace& ws, const std::string& model_sha256) {
    const auto manifest = read_json(ws.sae_manifest(), "SAE suite; run `pisces train-sae` first");
    check_schema(manifest, "sae_suite");
    if (manifest.at("model_sha256").get<std::string>() != model_sha256) {
        throw precondition_error("digest mismatch: the SAE suite was trained on a different model; re-run `pisces train-sae`");
    }
    sae_suite suite;
    for (const auto& l : manifest.at("layers")) {
        const auto layer = l.at("layer").get<std::size_t>();
        const auto path = ws.sae_layer(layer);
        if (!fs::exists(path)) throw precondition_error("missing SAE " + path.string() + "; re-run `pisces train-sae`");
        auto sae = load_sae(path);
        if (sae_digest(sae) != l.at("sha256").get<std::string>()) {
            throw precondition_error("digest mismatch: " + path.string() + " differs from the suite manifest; re-run `pisces train-sae`");
        }
        suite.emplace(layer, std::move(sae));
    }
    return suite;
}

/// Seeds are token ids or token texts. A text matches its exact spelling
/// first, then the space-prefixed word form (" Greece" for "Greece").
inline std::vector<std::uint32_t> resolve_seeds(const std::vector<std::string>& items, const model_weights& model) {
    std::vector<std::uint32_t> out;
    const auto n = model.config.vocab_size;
    for (const auto& item : items) {
        std::optional<std::uint32_t> hit;
        for (std::uint32_t t = 0; t < n && !hit; ++t) {
            if (model.token_text(t) == item) hit = t;
        }
        const auto word = detail::trim(item);
        for (std::uint32_t t = 0; t < n && !hit; ++t) {
            if (model.token_text(t) == " " + word) hit = t;
        }
        if (!hit && !word.empty() && word.find_first_not_of("0123456789") == std::string::npos) {
            const auto id = std::stoull(word);
            if (id < n) hit = static_cast<std::uint32_t>(id);
        }
        if (!hit) throw validation_error("seed '" + item + "' is neither a token of the vocabulary nor a token id");
        if (std::find(out.begin(), out.end(), *hit) == out.end()) out.push_back(*hit);
    }
    return out;
}

// ---------------------------------------------------------------- forge

inline nlohmann::json cmd_forge(const run_config& cfg) {
    const workspace ws{cfg.workdir};
    forge_spec spec = cfg.forge_spec.empty()
                          ? default_forge_spec(cfg.seed)
                          : read_artifact<forge_spec>(cfg.forge_spec, "forge spec file");
    const auto fr = forge(spec);
    const auto sha = model_digest(fr.model);

    save_weights(fr.model, ws.model());
    write_json(ws.spec(), spec);
    nlohmann::json truth = fr.truth;
    truth["model_sha256"] = sha;
    write_json(ws.truth(), truth);

    const auto vocab = spec.model.vocab_size;
    write_json(ws.sae_text(),
               detail::tagged("sae_text", {{"train", gen_uniform_corpus(vocab, cfg.sae_text_sequences, corpus_sequence_length, cfg.seed + 1)},
                                           {"heldout", gen_uniform_corpus(vocab, cfg.sae_heldout_sequences, corpus_sequence_length, cfg.seed + 99)}}));
    write_json(ws.neutral(), detail::tagged("corpus", {{"sequences", gen_neutral_corpus(spec, cfg.neutral_sequences, cfg.seed + 5)}}));

    nlohmann::json recall = nlohmann::json::object();
    for (const auto& pc : fr.truth.concepts) recall[pc.concept_id] = pc.recall;
    for (const auto& c : spec.concepts) {
        const auto cp = gen_corpora(spec, c.concept_id, cfg.corpus_sequences, cfg.seed + 3);
        write_json(ws.corpora(c.concept_id),
                   detail::tagged("corpora", {{"forget", cp.forget}, {"retain", cp.retain}, {"stats", cp.stats}}));
        write_json(ws.probes(c.concept_id),
                   detail::probe_suite_json(make_probe_suite(spec, c.concept_id, cfg.probes_per_concept, cfg.seed + 7)));
        write_json(ws.validation_probes(c.concept_id),
                   detail::probe_suite_json(make_probe_suite(spec, c.concept_id, cfg.probes_per_concept, cfg.seed + 11)));
    }
    std::vector<std::string> forget_ids;
    for (const auto& c : spec.concepts) forget_ids.push_back(c.concept_id);
    return {{"model", ws.model().string()}, {"model_sha256", sha}, {"forget_concepts", forget_ids}, {"recall", recall}};
}

// ---------------------------------------------------------------- train-sae

inline nlohmann::json cmd_train_sae(const run_config& cfg) {
    const workspace ws{cfg.workdir};
    const auto fx = load_fixture(ws);
    const auto text = read_json(ws.sae_text(), "SAE training text; run `pisces forge` first");
    check_schema(text, "sae_text");
    const auto train = detail::corpus_from(text, "train");
    const auto heldout = detail::corpus_from(text, "heldout");

    sae_train_config tc = cfg.sae;
    tc.seed = cfg.seed;
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < fx.model.config.n_layers; ++l) {
        auto sae = train_sae(collect_mlp_outputs(fx.model, l, train), tc, l, "uniform token text");
        sae.heldout_error = mean_reconstruction_error(sae, collect_mlp_outputs(fx.model, l, heldout));
        save_sae(sae, ws.sae_layer(l));
        layers.push_back({{"layer", l},
                          {"features", sae.n_features()},
                          {"heldout_error", sae.heldout_error},
                          {"sha256", sae_digest(sae)}});
    }
    nlohmann::json manifest = detail::tagged("sae_suite", {{"model_sha256", fx.model_sha256},
                                                           {"layers", layers},
                                                           {"training", {{"l1_coefficient", cfg.sae.l1_coefficient},
                                                                         {"learning_rate", cfg.sae.learning_rate},
                                                                         {"steps", cfg.sae.steps},
                                                                         {"batch_size", cfg.sae.batch_size},
                                                                         {"seed", tc.seed}}}});
    write_json(ws.sae_manifest(), manifest);
    return {{"layers", layers}};
}

// ---------------------------------------------------------------- discover

inline nlohmann::json cmd_discover(const run_config& cfg) {
    detail::require_concept(cfg, "discover");
    const workspace ws{cfg.workdir};
    const auto fx = load_fixture(ws);
    const auto suite = load_suite(ws, fx.model_sha256);
    const auto cp = read_json(ws.corpora(cfg.concept_id), "corpora for '" + cfg.concept_id + "'; is it a forget concept of the forged spec?");
    check_schema(cp, "corpora");

    discovery_params dp;
    dp.alpha = cfg.alpha;
    dp.top_t = cfg.top_t ? cfg.top_t : default_top_t(fx.model.config.vocab_size, cfg.alpha);
    dp.cosine_threshold = cfg.cosine_threshold;
    dp.seeds = resolve_seeds(cfg.seeds, fx.model);
    dp.stopwords = {fx.spec.stop_tokens.begin(), fx.spec.stop_tokens.end()};
    const auto set = discover(cfg.concept_id, detail::corpus_from(cp, "forget"), fx.model, suite, dp);
    write_json(ws.features(cfg.concept_id), set);
    return {{"concept", cfg.concept_id},
            {"top_t", dp.top_t},
            {"expanded_tokens", set.tokens.expanded.size()},
            {"candidates", set.candidates.size()},
            {"pending", set.pending_count()},
            {"features", ws.features(cfg.concept_id).string()}};
}

// ---------------------------------------------------------------- curate

inline std::atomic<bool>& curate_stop_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}

inline concept_feature_set load_feature_set(const workspace& ws, const std::string& concept_id) {
    return read_artifact<concept_feature_set>(ws.features(concept_id),
                                              "feature set for '" + concept_id + "'; run `pisces discover` first", "feature_set");
}

/// Serves the curation API until no verdict is pending (or the stop flag is
/// raised). With `headless`, accepts every pending candidate instead.
/// `on_listening` receives the bound port once the server is up.
inline nlohmann::json cmd_curate(const run_config& cfg, const std::function<void(int)>& on_listening = {}) {
    const workspace ws{cfg.workdir};
    std::vector<std::string> ids;
    if (!cfg.concept_id.empty()) {
        ids.push_back(cfg.concept_id);
    } else if (fs::exists(ws.root / "features")) {
        for (const auto& e : fs::directory_iterator(ws.root / "features")) {
            if (e.path().extension() == ".json") ids.push_back(e.path().stem().string());
        }
        std::sort(ids.begin(), ids.end());
    }
    if (ids.empty()) throw precondition_error("curate: no feature sets found; run `pisces discover` first");

    std::map<std::string, concept_feature_set> sets;
    std::map<std::string, fs::path> paths;
    for (const auto& id : ids) {
        sets.emplace(id, load_feature_set(ws, id));
        paths.emplace(id, ws.features(id));
    }

    if (cfg.headless) {
        nlohmann::json accepted = nlohmann::json::object();
        for (auto& [id, set] : sets) {
            accepted[id] = accept_pending(set);
            write_json(paths.at(id), set);
        }
        return {{"mode", "headless"}, {"accepted", accepted}};
    }

    decision_store store(std::move(sets), paths, ws.audit());
    httplib::Server server;
    install_curation_routes(server, store);
    if (!cfg.ui_dir.empty()) {
        if (!server.set_mount_point("/", cfg.ui_dir)) throw io_error("curate: UI directory '" + cfg.ui_dir + "' not found");
    }
    int port = cfg.port;
    if (port == 0) port = server.bind_to_any_port("127.0.0.1");
    else if (!server.bind_to_port("127.0.0.1", port)) port = -1;
    if (port < 0) throw io_error("curate: cannot bind 127.0.0.1:" + std::to_string(cfg.port));
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    if (on_listening) on_listening(port);
    const bool resolved = store.wait_until_resolved([] { return curate_stop_flag().load(); });
    server.stop();
    worker.join();
    if (!resolved) throw precondition_error("curate: interrupted with " + std::to_string(store.pending()) + " verdicts pending");
    return {{"mode", "interactive"}, {"port", port}, {"decisions", store.audit().size()}};
}

// ---------------------------------------------------------------- erase

struct erase_inputs {
    loaded_fixture fx;
    sae_suite suite;
    concept_feature_set set;
    activation_trace signs;
    probe_suite probes;
    corpus forget;
    corpus neutral;
};

/// Loads everything erasure needs, resolves headless verdicts and runs
/// validation pruning; the feature set is written back when either changes it.
inline erase_inputs prepare_erasure(const run_config& cfg, const std::string& cmd) {
    detail::require_concept(cfg, cmd);
    const workspace ws{cfg.workdir};
    erase_inputs in;
    in.fx = load_fixture(ws);
    in.suite = load_suite(ws, in.fx.model_sha256);
    in.set = load_feature_set(ws, cfg.concept_id);
    if (in.set.metadata.value("model_sha256", std::string()) != in.fx.model_sha256 ||
        in.set.metadata.value("sae_suite_sha256", std::string()) != suite_digest(in.suite)) {
        throw precondition_error("digest mismatch: features for '" + cfg.concept_id +
                                 "' were discovered against a different model or SAE suite; re-run `pisces discover`");
    }
    const auto before = nlohmann::json(in.set).dump();
    if (cfg.headless) accept_pending(in.set);
    in.set.require_ready_for_erasure();

    const auto cp = read_json(ws.corpora(cfg.concept_id), "corpora for '" + cfg.concept_id + "'");
    in.forget = detail::corpus_from(cp, "forget");
    in.signs = neuron_sign_trace(in.fx.model, in.forget);
    in.probes = detail::probe_suite_from(read_json(ws.probes(cfg.concept_id), "probes for '" + cfg.concept_id + "'"));
    in.neutral = detail::corpus_from(read_json(ws.neutral(), "neutral corpus"));

    if (cfg.prune_limit >= 0.0) {
        const auto validation =
            detail::probe_suite_from(read_json(ws.validation_probes(cfg.concept_id), "validation probes for '" + cfg.concept_id + "'"));
        const auto out = prune_by_validation(in.set, in.fx.model, in.suite, in.signs, validation.retain(), cfg.prune_limit, cfg.erase);
        if (out.emptied) {
            write_json(ws.features(cfg.concept_id), in.set);
            throw precondition_error("validation pruning removed every accepted feature of '" + cfg.concept_id +
                                     "'; raise --config prune_limit or re-curate");
        }
    }
    if (nlohmann::json(in.set).dump() != before) write_json(ws.features(cfg.concept_id), in.set);
    return in;
}

inline nlohmann::json probe_metrics(const model_weights& edited, const model_weights& base, const probe_suite& ps,
                                    const corpus& neutral) {
    const double be = eval_probes(base, ps.efficacy), ee = eval_probes(edited, ps.efficacy);
    const double bs = eval_probes(base, ps.similar_domain), es = eval_probes(edited, ps.similar_domain);
    const double bu = eval_probes(base, ps.unrelated), eu = eval_probes(edited, ps.unrelated);
    const double br = eval_probes(base, ps.retain()), er = eval_probes(edited, ps.retain());
    return {{"efficacy", {{"baseline", be}, {"edited", ee}, {"normalized", normalized(ee, be)}}},
            {"similar_domain", {{"baseline", bs}, {"edited", es}, {"normalized", normalized(es, bs)}}},
            {"unrelated", {{"baseline", bu}, {"edited", eu}, {"normalized", normalized(eu, bu)}}},
            {"retain", {{"baseline", br}, {"edited", er}, {"normalized", normalized(er, br)}}},
            {"coherence_ratio", coherence_proxy(edited, base, neutral)}};
}

inline nlohmann::json cmd_erase(const run_config& cfg) {
    const auto in = prepare_erasure(cfg, "erase");
    const workspace ws{cfg.workdir};
    model_weights edited = in.fx.model;
    const auto plan = build_plan(edited, in.suite, in.set, in.signs, cfg.erase);
    auto report = apply_edit(edited, in.suite, plan);
    report.evaluation = probe_metrics(edited, in.fx.model, in.probes, in.neutral);

    save_weights(edited, ws.erased_model(cfg.concept_id));
    write_json(ws.plan(cfg.concept_id), plan);
    nlohmann::json rep = report;
    rep["base_model_sha256"] = in.fx.model_sha256;
    rep["edited_model_sha256"] = model_digest(edited);
    rep["plan_sha256"] = sha256_hex(nlohmann::json(plan).dump());
    write_json(ws.erase_report(cfg.concept_id), rep);
    return {{"concept", cfg.concept_id},
            {"features", report.n_features},
            {"vectors", report.n_vectors},
            {"mode", to_string(cfg.erase.mode)},
            {"efficacy_normalized", report.evaluation["efficacy"]["normalized"]},
            {"retain_normalized", report.evaluation["retain"]["normalized"]},
            {"coherence_ratio", report.evaluation["coherence_ratio"]}};
}

// ---------------------------------------------------------------- eval

/// Relearning curve: efficacy accuracy every `every` steps (and at step 0).
inline nlohmann::json relearn_curve(const model_weights& start, const corpus& data, const relearn_config& rc,
                                    const probe_set& efficacy, std::size_t every) {
    nlohmann::json steps = nlohmann::json::array(), acc = nlohmann::json::array();
    steps.push_back(0);
    acc.push_back(eval_probes(start, efficacy));
    const auto res = relearn(start, data, rc, [&](std::size_t step, const model_weights& m) {
        if (every && step % every == 0 && step != rc.steps) steps.push_back(step), acc.push_back(eval_probes(m, efficacy));
    });
    steps.push_back(rc.steps);
    acc.push_back(eval_probes(res.model, efficacy));
    return {{"steps", steps}, {"efficacy_accuracy", acc}, {"loss_first", res.losses.front()}, {"loss_last", res.losses.back()},
            {"final_efficacy_accuracy", acc.back()}};
}

inline nlohmann::json cmd_eval(const run_config& cfg) {
    detail::require_concept(cfg, "eval");
    const workspace ws{cfg.workdir};
    const auto fx = load_fixture(ws);
    const auto suite = load_suite(ws, fx.model_sha256);
    const auto rep = read_json(ws.erase_report(cfg.concept_id), "erase report for '" + cfg.concept_id + "'; run `pisces erase` first");
    const auto plan = read_artifact<edit_plan>(ws.plan(cfg.concept_id), "edit plan for '" + cfg.concept_id + "'", "edit_plan");
    if (plan.model_digest != fx.model_sha256) throw precondition_error("digest mismatch: the edit plan was built for a different model; re-run `pisces erase`");
    const auto edited = load_weights(ws.erased_model(cfg.concept_id));
    if (model_digest(edited) != rep.at("edited_model_sha256").get<std::string>()) {
        throw precondition_error("digest mismatch: " + ws.erased_model(cfg.concept_id).string() + " is not the model erase wrote");
    }
    const auto set = load_feature_set(ws, cfg.concept_id);
    const auto probes = detail::probe_suite_from(read_json(ws.probes(cfg.concept_id), "probes"));
    const auto neutral = detail::corpus_from(read_json(ws.neutral(), "neutral corpus"));
    const auto cp = read_json(ws.corpora(cfg.concept_id), "corpora");
    const auto forget = detail::corpus_from(cp, "forget");

    nlohmann::json out = detail::tagged("eval_report", {{"concept_id", cfg.concept_id},
                                                        {"params", plan.params},
                                                        {"edited_model_sha256", rep.at("edited_model_sha256")},
                                                        {"metrics", probe_metrics(edited, fx.model, probes, neutral)}});
    if (cfg.relearn.steps > 0) {
        const auto filtered = filter_relearn_data(forget, answer_pairs(probes.efficacy));
        const auto naive_row = top_scoring_row(score_vectors(fx.model, suite, signed_members(set)));
        const auto naive = zero_row(fx.model, naive_row);
        relearn_config rc = cfg.relearn;
        rc.seed = cfg.seed;
        const auto pisces_curve = relearn_curve(edited, filtered.kept, rc, probes.efficacy, cfg.relearn_eval_every);
        const auto naive_curve = relearn_curve(naive, filtered.kept, rc, probes.efficacy, cfg.relearn_eval_every);
        const double base = eval_probes(fx.model, probes.efficacy);
        out["relearning"] = {{"config", {{"steps", rc.steps}, {"learning_rate", rc.learning_rate}, {"batch_size", rc.batch_size}}},
                             {"filtered_sequences", filtered.kept.size()},
                             {"removed_sequences", filtered.removed.size()},
                             {"pisces", pisces_curve},
                             {"naive_top_row", naive_curve},
                             {"naive_row", naive_row},
                             {"pisces_normalized", normalized(pisces_curve["final_efficacy_accuracy"].get<double>(), base)},
                             {"naive_normalized", normalized(naive_curve["final_efficacy_accuracy"].get<double>(), base)}};
    }
    write_json(ws.eval(cfg.concept_id), out);
    nlohmann::json summary = {{"concept", cfg.concept_id}, {"metrics", out["metrics"]}};
    if (out.contains("relearning")) {
        summary["relearned_pisces"] = out["relearning"]["pisces_normalized"];
        summary["relearned_naive"] = out["relearning"]["naive_normalized"];
    }
    return summary;
}

// ---------------------------------------------------------------- sweep

inline std::string frontier_table(const sweep_result& s) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << "concept " << s.concept_id << "  mode " << to_string(s.mode) << "\n";
    os << "    mu    tau  vectors  accuracy  specificity  coherence  harmonic  selected\n";
    for (const auto& r : s.rows) {
        os << std::setw(6) << r.params.mu << " " << std::setw(6) << r.params.tau << " " << std::setw(8) << r.n_vectors << " ";
        if (!r.applied) {
            os << "  refused\n";
            continue;
        }
        os << std::setw(9) << normalized(r.efficacy_accuracy, s.baseline_efficacy) << " " << std::setw(12) << r.specificity << " "
           << std::setw(10) << r.coherence << " " << std::setw(9) << r.harmonic << "  " << (r.selected ? "*" : "") << "\n";
    }
    return os.str();
}

inline nlohmann::json cmd_sweep(const run_config& cfg) {
    auto in = prepare_erasure(cfg, "sweep");
    const workspace ws{cfg.workdir};
    sweep_inputs si;
    si.model = &in.fx.model;
    si.suite = &in.suite;
    si.features = signed_members(in.set);
    si.concept_id = cfg.concept_id;
    si.feature_set_digest = feature_set_digest(in.set);
    si.signs = &in.signs;
    si.efficacy = in.probes.efficacy;
    si.retain = in.probes.retain();
    si.neutral = in.neutral;
    si.mode = cfg.erase.mode;
    const auto res = run_sweep(si, cfg.grid);
    write_json(ws.sweep(cfg.concept_id), frontier_json(res));
    write_text_atomic(ws.sweep_table(cfg.concept_id), frontier_table(res));
    nlohmann::json summary = {{"concept", cfg.concept_id}, {"configs", res.rows.size()}};
    if (const auto* r = res.selected()) {
        summary["selected"] = {{"tau", r->params.tau}, {"mu", r->params.mu}, {"harmonic_mean", r->harmonic},
                               {"efficacy_normalized", normalized(r->efficacy_accuracy, res.baseline_efficacy)},
                               {"retain_normalized", r->specificity}, {"coherence_ratio", r->coherence_ratio}};
    } else {
        summary["selected"] = nullptr;
    }
    return summary;
}

// ---------------------------------------------------------------- report

inline nlohmann::json cmd_report(const run_config& cfg) {
    const workspace ws{cfg.workdir};
    const auto dir = ws.root / "eval";
    std::vector<fs::path> evals;
    if (fs::exists(dir)) {
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.path().extension() == ".json") evals.push_back(e.path());
        }
    }
    if (evals.empty()) throw precondition_error("report: no evaluations found; run `pisces eval` first");
    std::sort(evals.begin(), evals.end());

    nlohmann::json rows = nlohmann::json::array();
    std::ostringstream table;
    table << std::fixed << std::setprecision(1);
    table << "concept        accuracy  similar-domain  unrelated  coherence  relearned  relearned(naive)\n";
    for (const auto& p : evals) {
        const auto e = read_json(p, "evaluation");
        check_schema(e, "eval_report");
        const auto& m = e.at("metrics");
        nlohmann::json row = {{"concept_id", e.at("concept_id")},
                              {"accuracy", 100.0 * m["efficacy"]["normalized"].get<double>()},
                              {"similar_domain", 100.0 * m["similar_domain"]["normalized"].get<double>()},
                              {"unrelated", 100.0 * m["unrelated"]["normalized"].get<double>()},
                              {"coherence", 100.0 * m["coherence_ratio"].get<double>()},
                              {"relearning_accuracy", nullptr},
                              {"relearning_accuracy_naive", nullptr}};
        if (e.contains("relearning")) {
            row["relearning_accuracy"] = 100.0 * e["relearning"]["pisces_normalized"].get<double>();
            row["relearning_accuracy_naive"] = 100.0 * e["relearning"]["naive_normalized"].get<double>();
        }
        const auto cell = [](const nlohmann::json& v) {
            std::ostringstream c;
            c << std::fixed << std::setprecision(1);
            if (v.is_null()) c << "-";
            else c << v.get<double>() << "%";
            return c.str();
        };
        table << std::left << std::setw(14) << row["concept_id"].get<std::string>() << std::right << std::setw(9)
              << cell(row["accuracy"]) << std::setw(16) << cell(row["similar_domain"]) << std::setw(11) << cell(row["unrelated"])
              << std::setw(11) << cell(row["coherence"]) << std::setw(11) << cell(row["relearning_accuracy"]) << std::setw(18)
              << cell(row["relearning_accuracy_naive"]) << "\n";
        rows.push_back(std::move(row));
    }
    table << "all columns normalized to the unedited model = 100%; coherence is the perplexity ratio on neutral text\n";
    write_json(ws.report(), detail::tagged("report", {{"rows", rows}}));
    write_text_atomic(ws.report_table(), table.str());
    return {{"report", ws.report().string()}, {"table", table.str()}};
}

// ---------------------------------------------------------------- dispatch

/// Runs one subcommand and writes its log. Returns the command's summary.
inline nlohmann::json run_command(const std::string& cmd, const run_config& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    nlohmann::json summary;
    if (cmd == "forge") summary = cmd_forge(cfg);
    else if (cmd == "train-sae") summary = cmd_train_sae(cfg);
    else if (cmd == "discover") summary = cmd_discover(cfg);
    else if (cmd == "curate") {
        summary = cmd_curate(cfg, [](int port) {
            std::fprintf(stderr, "curation API listening on http://127.0.0.1:%d/api/v1/ (waiting for all verdicts)\n", port);
        });
    }
    else if (cmd == "erase") summary = cmd_erase(cfg);
    else if (cmd == "eval") summary = cmd_eval(cfg);
    else if (cmd == "sweep") summary = cmd_sweep(cfg);
    else if (cmd == "report") summary = cmd_report(cfg);
    else throw validation_error("unknown command '" + cmd + "'");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const workspace ws{cfg.workdir};
    std::string name = cmd;
    const bool per_concept = cmd != "forge" && cmd != "train-sae" && cmd != "report";
    if (per_concept && !cfg.concept_id.empty()) name += "_" + cfg.concept_id;
    write_json(ws.log(name), detail::tagged("log", {{"command", cmd}, {"config", cfg}, {"summary", summary}, {"elapsed_seconds", secs}}));
    return summary;
}

} // namespace pisces
