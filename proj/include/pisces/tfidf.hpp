#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "pisces/error.hpp"
#include "pisces/transformer.hpp"

namespace pisces {

/// Name of the idf variant, recorded in discovery metadata.
inline constexpr const char* tfidf_formula = "tf * (ln((1 + n_docs) / (1 + df)) + 1)";

struct token_score {
    std::uint32_t token = 0;
    double score = 0.0;
};

/// Ranks tokens of a document collection by tf-idf summed over documents.
/// tf is the raw in-document count; idf is the smoothed natural-log variant.
/// Stopwords are removed before counting. Ties break by ascending token id.
inline std::vector<token_score> rank_tokens_tfidf(const corpus& documents, const std::set<std::uint32_t>& stopwords) {
    if (documents.empty()) throw precondition_error("tf-idf: empty corpus");
    if (documents.size() < 2) throw precondition_error("tf-idf: need at least 2 documents for document frequencies");

    std::vector<std::map<std::uint32_t, std::size_t>> tf(documents.size());
    std::map<std::uint32_t, std::size_t> df;
    for (std::size_t i = 0; i < documents.size(); ++i) {
        for (auto t : documents[i]) {
            if (!stopwords.contains(t)) ++tf[i][t];
        }
        for (const auto& [t, _] : tf[i]) ++df[t];
    }

    const double n = static_cast<double>(documents.size());
    std::map<std::uint32_t, double> total;
    for (const auto& counts : tf) {
        for (const auto& [t, c] : counts) {
            const double idf = std::log((1.0 + n) / (1.0 + static_cast<double>(df[t]))) + 1.0;
            total[t] += static_cast<double>(c) * idf;
        }
    }

    std::vector<token_score> ranked;
    ranked.reserve(total.size());
    for (const auto& [t, s] : total) ranked.push_back({t, s});
    std::stable_sort(ranked.begin(), ranked.end(), [](const token_score& a, const token_score& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.token < b.token;
    });
    return ranked;
}

} // namespace pisces
