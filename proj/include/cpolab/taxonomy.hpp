#pragma once

// Hierarchical attribute-evaluation criteria: a tree of dimensions whose leaves
// are positive/negative attribute pairs, plus the fixed-width multi-hot
// condition encoding used by the denoiser.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cpolab {

/// Content families known to the point-cloud generator. Slot order in the
/// condition vector follows declaration order.
enum class Family { Ring, Grid };

inline constexpr std::size_t kFamilyCount = 2;
inline constexpr Family kAllFamilies[kFamilyCount] = {Family::Ring, Family::Grid};

std::string_view to_string(Family f);
/// Throws ValidationError("unknown family: ...") for names outside the registry.
Family parse_family(std::string_view name);

enum class Polarity { Pos, Neg };

struct LeafPair {
    std::string pair_id;
    std::string pos_label;
    std::string neg_label;
    /// Id of the leaf's parent dimension when siblings are mutually exclusive.
    std::optional<std::string> exclusivity_group;
    /// "ALL", or a family name ("RING", "GRID") restricting applicability.
    std::string applicability_predicate_id;

    bool operator==(const LeafPair&) const = default;
};

struct DimensionNode {
    std::string id;
    std::vector<DimensionNode> children;
    /// Present only on leaves; a leaf's id equals its pair_id.
    std::optional<LeafPair> pair;

    bool operator==(const DimensionNode&) const = default;
};

struct AttributeTree {
    std::vector<DimensionNode> roots;
    int max_depth = 5;

    bool operator==(const AttributeTree&) const = default;

    /// Leaf pairs in canonical order (depth-first, siblings sorted by id).
    std::vector<const LeafPair*> canonical_pairs() const;
    const LeafPair* find_pair(std::string_view pair_id) const;
    /// Id of the root dimension a pair lives under.
    std::string root_of(std::string_view pair_id) const;
};

struct Violation {
    std::string path;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

/// Two-root, four-pair tree used throughout the lab.
AttributeTree default_tree();

ValidationReport validate_tree(const AttributeTree& tree);

/// Pair ids (canonical order) whose applicability predicate accepts the family.
std::vector<std::string> applicable_pairs(const AttributeTree& tree, Family family);
std::vector<std::string> applicable_pairs(const AttributeTree& tree, std::string_view family);

struct AttributeEntry {
    std::string pair_id;
    Polarity polarity = Polarity::Pos;

    auto operator<=>(const AttributeEntry&) const = default;
};

/// Ordered set of (pair_id, polarity) entries.
class AttributeSet {
public:
    AttributeSet() = default;
    AttributeSet(std::initializer_list<AttributeEntry> entries);

    static AttributeSet of(Polarity polarity, const std::vector<std::string>& pair_ids);

    void insert(AttributeEntry entry);
    bool contains(const AttributeEntry& entry) const;
    bool contains_pair(std::string_view pair_id) const;
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::vector<AttributeEntry>& entries() const { return entries_; }
    std::vector<std::string> pair_ids() const;

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    bool operator==(const AttributeSet&) const = default;

private:
    std::vector<AttributeEntry> entries_;
};

struct ExclusivityConflict {
    std::string group;
    std::string first;
    std::string second;
};

/// Lists every two POS entries sharing an exclusivity group. Throws
/// ValidationError for pair ids absent from the tree.
std::vector<ExclusivityConflict> check_exclusivity(const AttributeTree& tree, const AttributeSet& set);

/// Index map realizing c = (y, A_pos, A_neg) as a 0/1 vector of width F + 2P.
class ConditionVocabulary {
public:
    explicit ConditionVocabulary(const AttributeTree& tree);

    std::size_t family_slots() const { return kFamilyCount; }
    std::size_t pair_count() const { return pair_ids_.size(); }
    std::size_t width() const { return kFamilyCount + 2 * pair_ids_.size(); }

    std::size_t family_index(Family f) const;
    std::size_t pos_index(std::string_view pair_id) const;
    std::size_t neg_index(std::string_view pair_id) const;
    const std::vector<std::string>& pair_ids() const { return pair_ids_; }

    std::size_t pos_begin() const { return kFamilyCount; }
    std::size_t neg_begin() const { return kFamilyCount + pair_ids_.size(); }

    bool operator==(const ConditionVocabulary&) const = default;

private:
    std::vector<std::string> pair_ids_;
    std::map<std::string, std::size_t, std::less<>> offset_;
};

using ConditionVector = std::vector<double>;

/// Null family and empty sets leave their block zero; all-null gives c_null.
/// Throws ValidationError for unknown pair ids or a wrong-polarity entry.
ConditionVector encode_condition(const ConditionVocabulary& vocab, std::optional<Family> y,
                                 const AttributeSet& a_pos, const AttributeSet& a_neg);

nlohmann::json tree_to_json(const AttributeTree& tree);
/// Structural parse only; run validate_tree for invariant checks.
AttributeTree tree_from_json(const nlohmann::json& doc);
AttributeTree load_tree(const std::string& path);
void save_tree(const std::string& path, const AttributeTree& tree);
/// Hex FNV-1a over the canonical JSON dump.
std::string tree_hash(const AttributeTree& tree);

}  // namespace cpolab
