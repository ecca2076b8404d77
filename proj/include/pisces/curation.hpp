#pragma once

// Decision store behind the curation HTTP API. One store per `pisces curate`
// process; it is the only writer of the feature-set artifacts it was given.
//
//   GET  /api/v1/concepts/{id}/candidates
//   POST /api/v1/concepts/{id}/verdicts  {feature, decision, reason, curator?, revision?}
//
// A POST carrying a `revision` that no longer matches the feature's current
// revision is a conflicting concurrent write: it is still applied (last
// writer wins) and audit-logged, but answered with 409 so the client knows it
// overrode someone.

#include <chrono>
#include <condition_variable>
#include <ctime>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "pisces/container.hpp"
#include "pisces/features.hpp"

namespace pisces {

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// What the UI renders for one candidate; highlighted tokens are members of
/// the expanded token set.
inline nlohmann::json candidate_view(const feature_candidate& c, const token_set& tokens, std::uint64_t revision) {
    auto tokens_json = [&](const std::vector<token_logit>& list) {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& t : list) {
            out.push_back({{"token", t.token}, {"text", t.text}, {"logit", t.logit}, {"highlighted", tokens.contains(t.token)}});
        }
        return out;
    };
    return {{"feature", c.key},
            {"top_tokens", tokens_json(c.evidence.top)},
            {"bottom_tokens", tokens_json(c.evidence.bottom)},
            {"intersection_top", c.intersection_top},
            {"intersection_bottom", c.intersection_bottom},
            {"suggested_sign", c.sign},
            {"verdict", to_string(c.verdict)},
            {"reason", c.reason},
            {"curator", c.curator},
            {"decided_at", c.decided_at},
            {"revision", revision}};
}

/// Headless curation: every pending candidate becomes accepted.
inline std::size_t accept_pending(concept_feature_set& set, const std::string& curator = "headless") {
    std::size_t n = 0;
    for (auto& c : set.candidates) {
        if (c.verdict != verdict_state::pending) continue;
        c.verdict = verdict_state::accepted;
        c.reason = "auto-accepted";
        c.curator = curator;
        c.decided_at.clear();
        ++n;
    }
    return n;
}

struct audit_entry {
    std::uint64_t seq = 0;
    std::string concept_id;
    feature_key feature;
    verdict_state previous = verdict_state::pending;
    verdict_state decision = verdict_state::pending;
    std::string reason;
    std::string curator;
    std::string timestamp;
    bool conflict = false;
};

inline void to_json(nlohmann::json& j, const audit_entry& e) {
    j = {{"seq", e.seq},
         {"concept_id", e.concept_id},
         {"feature", e.feature},
         {"previous", to_string(e.previous)},
         {"decision", to_string(e.decision)},
         {"reason", e.reason},
         {"curator", e.curator},
         {"timestamp", e.timestamp},
         {"conflict", e.conflict}};
}

struct http_reply {
    int status = 200;
    nlohmann::json body;
};

class decision_store {
public:
    /// `artifact` maps each concept to the file its feature set is persisted
    /// to; an empty path keeps that concept in memory only.
    decision_store(std::map<std::string, concept_feature_set> sets, std::map<std::string, std::filesystem::path> artifact,
                   std::filesystem::path audit_path = {})
        : sets_(std::move(sets)), artifact_(std::move(artifact)), audit_path_(std::move(audit_path)) {}

    http_reply candidates(const std::string& concept_id) const {
        std::lock_guard lock(mu_);
        const auto it = sets_.find(concept_id);
        if (it == sets_.end()) return not_found("unknown concept '" + concept_id + "'");
        nlohmann::json items = nlohmann::json::array();
        for (const auto& c : it->second.candidates) items.push_back(candidate_view(c, it->second.tokens, revision_of(concept_id, c.key)));
        return {200,
                {{"schema", schema_tag("curation")},
                 {"concept_id", concept_id},
                 {"pending", it->second.pending_count()},
                 {"candidates", std::move(items)}}};
    }

    http_reply submit(const std::string& concept_id, const nlohmann::json& body) {
        feature_key key;
        verdict_state decision;
        std::string reason, curator;
        std::optional<std::uint64_t> expected;
        try {
            key = body.at("feature").get<feature_key>();
            const auto d = body.at("decision").get<std::string>();
            if (d != "accept" && d != "reject") throw validation_error("decision must be 'accept' or 'reject'");
            decision = parse_verdict(d);
            reason = body.value("reason", std::string());
            curator = body.value("curator", std::string("anonymous"));
            if (body.contains("revision")) expected = body.at("revision").get<std::uint64_t>();
        } catch (const std::exception& e) {
            return {400, {{"schema", schema_tag("curation")}, {"error", std::string("bad verdict: ") + e.what()}}};
        }

        std::unique_lock lock(mu_);
        const auto it = sets_.find(concept_id);
        if (it == sets_.end()) return not_found("unknown concept '" + concept_id + "'");
        feature_candidate* cand = it->second.find(key);
        if (!cand) {
            return not_found("feature (" + std::to_string(key.layer) + ", " + std::to_string(key.feature) +
                             ") is not a candidate of '" + concept_id + "'");
        }

        auto& rev = revisions_[{concept_id, key}];
        audit_entry entry;
        entry.seq = audit_.size() + 1;
        entry.concept_id = concept_id;
        entry.feature = key;
        entry.previous = cand->verdict;
        entry.decision = decision;
        entry.reason = reason;
        entry.curator = curator;
        entry.timestamp = utc_timestamp();
        entry.conflict = expected && *expected != rev;

        cand->verdict = decision;
        cand->reason = reason;
        cand->curator = curator;
        cand->decided_at = entry.timestamp;
        ++rev;
        audit_.push_back(entry);
        persist(concept_id);

        nlohmann::json view = candidate_view(*cand, it->second.tokens, rev);
        view["schema"] = schema_tag("curation");
        view["pending"] = it->second.pending_count();
        lock.unlock();
        changed_.notify_all();
        if (entry.conflict) {
            view["conflict"] = "revision " + std::to_string(*expected) + " was superseded; this write was applied last";
            return {409, view};
        }
        return {200, view};
    }

    std::size_t pending() const {
        std::lock_guard lock(mu_);
        std::size_t n = 0;
        for (const auto& [_, s] : sets_) n += s.pending_count();
        return n;
    }

    /// Blocks until no verdict is pending or `stop` returns true (polled).
    template <typename StopFn>
    bool wait_until_resolved(StopFn stop, std::chrono::milliseconds poll = std::chrono::milliseconds(200)) {
        std::unique_lock lock(mu_);
        for (;;) {
            std::size_t n = 0;
            for (const auto& [_, s] : sets_) n += s.pending_count();
            if (n == 0) return true;
            if (stop()) return false;
            changed_.wait_for(lock, poll);
        }
    }

    concept_feature_set snapshot(const std::string& concept_id) const {
        std::lock_guard lock(mu_);
        const auto it = sets_.find(concept_id);
        if (it == sets_.end()) throw precondition_error("unknown concept '" + concept_id + "'");
        return it->second;
    }

    std::vector<audit_entry> audit() const {
        std::lock_guard lock(mu_);
        return audit_;
    }

private:
    static http_reply not_found(const std::string& msg) {
        return {404, {{"schema", schema_tag("curation")}, {"error", msg}}};
    }

    std::uint64_t revision_of(const std::string& concept_id, const feature_key& k) const {
        const auto it = revisions_.find({concept_id, k});
        return it == revisions_.end() ? 0 : it->second;
    }

    // caller holds mu_
    void persist(const std::string& concept_id) {
        if (const auto it = artifact_.find(concept_id); it != artifact_.end() && !it->second.empty()) {
            write_text_atomic(it->second, nlohmann::json(sets_.at(concept_id)).dump(2) + "\n");
        }
        if (!audit_path_.empty()) {
            nlohmann::json doc = {{"schema", schema_tag("curation_audit")}, {"entries", audit_}};
            write_text_atomic(audit_path_, doc.dump(2) + "\n");
        }
    }

    mutable std::mutex mu_;
    std::condition_variable changed_;
    std::map<std::string, concept_feature_set> sets_;
    std::map<std::string, std::filesystem::path> artifact_;
    std::filesystem::path audit_path_;
    std::map<std::pair<std::string, feature_key>, std::uint64_t> revisions_;
    std::vector<audit_entry> audit_;
};

inline void install_curation_routes(httplib::Server& server, decision_store& store) {
    auto send = [](httplib::Response& res, const http_reply& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    server.Get(R"(/api/v1/concepts/([^/]+)/candidates)", [&store, send](const httplib::Request& req, httplib::Response& res) {
        send(res, store.candidates(req.matches[1]));
    });
    server.Post(R"(/api/v1/concepts/([^/]+)/verdicts)", [&store, send](const httplib::Request& req, httplib::Response& res) {
        const auto body = nlohmann::json::parse(req.body, nullptr, false);
        if (body.is_discarded() || !body.is_object()) {
            send(res, {400, {{"schema", schema_tag("curation")}, {"error", "request body must be a JSON object"}}});
            return;
        }
        send(res, store.submit(req.matches[1], body));
    });
}

} // namespace pisces
