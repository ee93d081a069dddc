#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "matchs/errors.hpp"

namespace matchs {

// Square 0/1 matrix, row-major.
struct BinaryMatrix {
    std::size_t n = 0;
    std::vector<std::uint8_t> bits;

    BinaryMatrix() = default;
    explicit BinaryMatrix(std::size_t size, std::uint8_t fill = 0) : n(size), bits(size * size, fill) {}

    static BinaryMatrix identity(std::size_t size) {
        BinaryMatrix m(size);
        for (std::size_t i = 0; i < size; ++i) m.set(i, i);
        return m;
    }

    std::uint8_t at(std::size_t i, std::size_t j) const { return bits[i * n + j]; }
    void set(std::size_t i, std::size_t j, std::uint8_t v = 1) { bits[i * n + j] = v; }

    BinaryMatrix& operator|=(const BinaryMatrix& other) {
        for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = bits[i] | other.bits[i];
        return *this;
    }

    bool operator==(const BinaryMatrix&) const = default;
};

// C in {0,1}^{N x N x G}; slice k is relation k. Diagonals are always set.
class RelationTensor {
   public:
    RelationTensor() = default;

    RelationTensor(std::size_t n, std::vector<std::string> names) : n_(n), names_(std::move(names)) {
        slices_.assign(names_.size(), BinaryMatrix::identity(n));
    }

    std::size_t n() const { return n_; }
    std::size_t g() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    const BinaryMatrix& slice(std::size_t k) const { return slices_.at(k); }

    std::uint8_t at(std::size_t i, std::size_t j, std::size_t k) const { return slices_.at(k).at(i, j); }

    // Sets both directions of edge (i, j) in relation k.
    void connect(std::size_t i, std::size_t j, std::size_t k) {
        slices_.at(k).set(i, j);
        slices_.at(k).set(j, i);
    }

    std::size_t add_relation(const std::string& name) {
        names_.push_back(name);
        slices_.push_back(BinaryMatrix::identity(n_));
        return names_.size() - 1;
    }

    std::size_t index_of(const std::string& name) const {
        auto it = std::find(names_.begin(), names_.end(), name);
        if (it == names_.end()) throw DataError("unknown relation '" + name + "'");
        return static_cast<std::size_t>(it - names_.begin());
    }

    BinaryMatrix union_mask() const {
        BinaryMatrix m = BinaryMatrix::identity(n_);
        for (const auto& s : slices_) m |= s;
        return m;
    }

    // Same relation with stocks reordered: new index i holds old index perm[i].
    RelationTensor permuted(const std::vector<std::size_t>& perm) const {
        RelationTensor out(n_, names_);
        for (std::size_t k = 0; k < g(); ++k)
            for (std::size_t i = 0; i < n_; ++i)
                for (std::size_t j = 0; j < n_; ++j) out.slices_[k].set(i, j, slices_[k].at(perm[i], perm[j]));
        return out;
    }

   private:
    std::size_t n_ = 0;
    std::vector<std::string> names_;
    std::vector<BinaryMatrix> slices_;
};

// Text lines `relation_name,symbol_a,symbol_b`. Blank lines and lines starting
// with '#' are skipped. Edges are made undirected.
inline RelationTensor load_relations(const std::filesystem::path& path, const std::vector<std::string>& symbols) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open relation file " + path.string());
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < symbols.size(); ++i) index[symbols[i]] = i;

    RelationTensor rel(symbols.size(), {});
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
        if (cols.size() != 3) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected relation,symbol_a,symbol_b");
        }
        auto a = index.find(cols[1]);
        auto b = index.find(cols[2]);
        if (a == index.end() || b == index.end()) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": unknown symbol '" +
                            (a == index.end() ? cols[1] : cols[2]) + "'");
        }
        const auto& names = rel.names();
        auto it = std::find(names.begin(), names.end(), cols[0]);
        const std::size_t k = it == names.end() ? rel.add_relation(cols[0]) : static_cast<std::size_t>(it - names.begin());
        rel.connect(a->second, b->second, k);
    }
    if (rel.g() == 0) throw DataError("relation file " + path.string() + " defines no relations");
    return rel;
}

inline void save_relations(const std::filesystem::path& path, const RelationTensor& rel,
                           const std::vector<std::string>& symbols) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    for (std::size_t k = 0; k < rel.g(); ++k)
        for (std::size_t i = 0; i < rel.n(); ++i)
            for (std::size_t j = i + 1; j < rel.n(); ++j)
                if (rel.at(i, j, k)) out << rel.names()[k] << ',' << symbols[i] << ',' << symbols[j] << '\n';
}

// Per-head masks for the masked relational attention.
struct HeadMaskSet {
    std::vector<BinaryMatrix> masks;
    std::size_t unmasked_heads = 4;
    std::vector<std::size_t> group_assignment;  // relation index -> head index

    BinaryMatrix coverage() const {
        BinaryMatrix m = BinaryMatrix::identity(masks.empty() ? 0 : masks.front().n);
        for (const auto& mk : masks) m |= mk;
        return m;
    }
};

namespace detail {

inline double jaccard_off_diagonal(const BinaryMatrix& a, const BinaryMatrix& b) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.n; ++i)
        for (std::size_t j = 0; j < a.n; ++j) {
            if (i == j) continue;
            const bool x = a.at(i, j), y = b.at(i, j);
            inter += x && y;
            uni += x || y;
        }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

// Partitions the G relations into at most `max_heads` groups. With G <=
// max_heads each relation gets its own head; otherwise groups are merged
// agglomeratively, always joining the pair whose edge sets (off-diagonal) have
// the largest Jaccard similarity, ties going to the lowest relation indices.
inline HeadMaskSet group_relations(const RelationTensor& c, std::size_t max_heads = 12, std::size_t unmasked_heads = 4) {
    if (c.g() == 0) throw ContractError("group_relations: relation tensor has no relations");
    if (max_heads == 0) throw ContractError("group_relations: max_heads must be >= 1");

    std::vector<std::vector<std::size_t>> groups;
    std::vector<BinaryMatrix> masks;
    for (std::size_t k = 0; k < c.g(); ++k) {
        groups.push_back({k});
        masks.push_back(c.slice(k));
    }
    while (groups.size() > max_heads) {
        std::size_t best_a = 0, best_b = 1;
        double best = -1.0;
        // Groups stay ordered by their smallest relation index, so scanning
        // in order realises the tie-break.
        for (std::size_t a = 0; a < groups.size(); ++a)
            for (std::size_t b = a + 1; b < groups.size(); ++b) {
                const double s = detail::jaccard_off_diagonal(masks[a], masks[b]);
                if (s > best) {
                    best = s;
                    best_a = a;
                    best_b = b;
                }
            }
        groups[best_a].insert(groups[best_a].end(), groups[best_b].begin(), groups[best_b].end());
        masks[best_a] |= masks[best_b];
        groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(best_b));
        masks.erase(masks.begin() + static_cast<std::ptrdiff_t>(best_b));
    }

    HeadMaskSet out;
    out.masks = std::move(masks);
    out.unmasked_heads = unmasked_heads;
    out.group_assignment.assign(c.g(), 0);
    for (std::size_t h = 0; h < groups.size(); ++h)
        for (std::size_t k : groups[h]) out.group_assignment[k] = h;
    return out;
}

// All relations OR-ed into one mask (the "aggregated relations" ablation).
inline HeadMaskSet aggregated_masks(const RelationTensor& c, std::size_t unmasked_heads = 4) {
    HeadMaskSet out;
    out.masks.push_back(c.union_mask());
    out.unmasked_heads = unmasked_heads;
    out.group_assignment.assign(c.g(), 0);
    return out;
}

// Connected components of the undirected union graph of the selected
// relations. Labels are numbered by first appearance in stock order.
inline std::vector<int> clusters_from_relations(const RelationTensor& c, const std::vector<std::size_t>& relation_subset) {
    if (relation_subset.empty()) throw ContractError("clusters_from_relations: empty relation subset");
    const std::size_t n = c.n();
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (std::size_t k : relation_subset) {
        if (k >= c.g()) throw ContractError("clusters_from_relations: relation index out of range");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j && c.at(i, j, k)) {
                    const std::size_t ri = find(i), rj = find(j);
                    if (ri != rj) parent[std::max(ri, rj)] = std::min(ri, rj);
                }
    }
    std::vector<int> labels(n, -1);
    std::map<std::size_t, int> relabel;
    for (std::size_t i = 0; i < n; ++i) {
        auto [it, inserted] = relabel.try_emplace(find(i), static_cast<int>(relabel.size()));
        labels[i] = it->second;
    }
    return labels;
}

inline nlohmann::json head_grouping_report(const RelationTensor& c, const HeadMaskSet& heads) {
    nlohmann::json j;
    nlohmann::json assignment = nlohmann::json::object();
    for (std::size_t k = 0; k < c.g(); ++k) assignment[c.names()[k]] = heads.group_assignment.at(k);
    j["relation_to_head"] = assignment;
    j["masked_heads"] = heads.masks.size();
    j["unmasked_heads"] = heads.unmasked_heads;
    return j;
}

}  // namespace matchs
