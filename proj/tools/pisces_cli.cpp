// `pisces <command> [options]`: the staged erasure pipeline.
// Exit codes: 0 ok, 2 invalid input, 3 unmet precondition, 4 I/O failure.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pisces/pipeline.hpp"

namespace {

void on_sigint(int) { pisces::curate_stop_flag().store(true); }

const std::pair<const char*, const char*> commands[] = {
    {"forge", "build the synthetic model, corpora and probes"},
    {"train-sae", "train one sparse autoencoder per MLP layer"},
    {"discover", "find candidate SAE features for --concept from --seeds"},
    {"curate", "serve the curation API until every verdict is in (or --headless: accept all)"},
    {"erase", "edit the MLP vectors carrying --concept"},
    {"eval", "probe accuracy, coherence and relearning for an erased model"},
    {"sweep", "grid over mu x tau and mark the best harmonic-mean configuration"},
    {"report", "collect evaluations into report.json / report.txt"},
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Concept erasure by editing MLP vectors in SAE feature space"};
    app.require_subcommand(1, 1);
    app.fallthrough();

    std::string config_path, workdir, concept_id, mode, seeds, ui_dir;
    std::uint64_t seed = 0;
    double tau = 0.0, mu = 0.0;
    int port = 0;
    bool headless = false;
    auto* o_config = app.add_option("--config", config_path, "config file: JSON object or key=value lines");
    auto* o_workdir = app.add_option("--workdir", workdir, "work directory (default: $PISCES_WORKDIR or ./pisces_work)");
    auto* o_seed = app.add_option("--seed", seed, "global seed");
    auto* o_concept = app.add_option("--concept", concept_id, "concept id");
    auto* o_seeds = app.add_option("--seeds", seeds, "comma-separated seed tokens (text or id) for discover");
    auto* o_tau = app.add_option("--tau", tau, "selection threshold in [0,1]");
    auto* o_mu = app.add_option("--mu", mu, "clamp strength (>= 0)");
    auto* o_mode = app.add_option("--mode", mode, "edit mode: full | delta")->check(CLI::IsMember({"full", "full_reconstruct", "delta"}));
    auto* o_headless = app.add_flag("--headless", headless, "accept pending verdicts without the curation UI");
    auto* o_port = app.add_option("--port", port, "curation API port on 127.0.0.1 (0 picks a free one)");
    auto* o_ui = app.add_option("--ui-dir", ui_dir, "static UI assets to serve at / during curate");
    for (const auto& [name, help] : commands) app.add_subcommand(name, help);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();

    try {
        pisces::run_config cfg;
        if (o_config->count()) pisces::apply_config(cfg, pisces::load_config_file(config_path));
        if (const char* env = std::getenv("PISCES_WORKDIR"); env && *env) cfg.workdir = env;
        if (o_workdir->count()) cfg.workdir = workdir;
        if (o_seed->count()) cfg.seed = seed;
        if (o_concept->count()) cfg.concept_id = concept_id;
        if (o_seeds->count()) cfg.seeds = pisces::detail::string_list(seeds);
        if (o_tau->count()) cfg.erase.tau = tau;
        if (o_mu->count()) cfg.erase.mu = mu;
        if (o_mode->count()) cfg.erase.mode = pisces::parse_edit_mode(mode == "full" ? "full_reconstruct" : mode);
        if (o_headless->count()) cfg.headless = headless;
        if (o_port->count()) cfg.port = port;
        if (o_ui->count()) cfg.ui_dir = ui_dir;
        cfg.erase.validate();

        std::signal(SIGINT, on_sigint);
        std::signal(SIGTERM, on_sigint);
        const auto summary = pisces::run_command(cmd, cfg);
        if (summary.contains("table")) std::cout << summary["table"].get<std::string>();
        else std::cout << summary.dump(2) << "\n";
        return 0;
    } catch (const pisces::error& e) {
        std::cerr << "pisces " << cmd << ": " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "pisces " << cmd << ": " << e.what() << "\n";
        return 4;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "pisces " << cmd << ": malformed artifact: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "pisces " << cmd << ": " << e.what() << "\n";
        return 1;
    }
}
