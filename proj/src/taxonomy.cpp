#include "cpolab/taxonomy.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>

#include "cpolab/error.hpp"
#include "cpolab/rng.hpp"

namespace cpolab {

using nlohmann::json;

std::string_view to_string(Family f) {
    switch (f) {
        case Family::Ring: return "RING";
        case Family::Grid: return "GRID";
    }
    return "?";
}

Family parse_family(std::string_view name) {
    for (Family f : kAllFamilies) {
        if (to_string(f) == name) return f;
    }
    throw ValidationError("unknown family: " + std::string(name));
}

namespace {

bool predicate_known(std::string_view id) {
    if (id == "ALL") return true;
    for (Family f : kAllFamilies) {
        if (to_string(f) == id) return true;
    }
    return false;
}

bool predicate_accepts(std::string_view id, Family f) {
    return id == "ALL" || id == to_string(f);
}

std::vector<const DimensionNode*> sorted_children(const std::vector<DimensionNode>& nodes) {
    std::vector<const DimensionNode*> out;
    out.reserve(nodes.size());
    for (const auto& n : nodes) out.push_back(&n);
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->id < b->id; });
    return out;
}

void collect_pairs(const std::vector<DimensionNode>& nodes, std::vector<const LeafPair*>& out) {
    for (const DimensionNode* n : sorted_children(nodes)) {
        if (n->pair) {
            out.push_back(&*n->pair);
        } else {
            collect_pairs(n->children, out);
        }
    }
}

LeafPair make_pair(std::string id, std::string pos, std::string neg, std::optional<std::string> group,
                   std::string predicate) {
    return LeafPair{std::move(id), std::move(pos), std::move(neg), std::move(group), std::move(predicate)};
}

DimensionNode leaf(LeafPair p) {
    DimensionNode n;
    n.id = p.pair_id;
    n.pair = std::move(p);
    return n;
}

}  // namespace

std::vector<const LeafPair*> AttributeTree::canonical_pairs() const {
    std::vector<const LeafPair*> out;
    collect_pairs(roots, out);
    return out;
}

const LeafPair* AttributeTree::find_pair(std::string_view pair_id) const {
    for (const LeafPair* p : canonical_pairs()) {
        if (p->pair_id == pair_id) return p;
    }
    return nullptr;
}

std::string AttributeTree::root_of(std::string_view pair_id) const {
    for (const auto& root : roots) {
        std::vector<const LeafPair*> pairs;
        collect_pairs({root}, pairs);
        for (const LeafPair* p : pairs) {
            if (p->pair_id == pair_id) return root.id;
        }
    }
    throw ValidationError("pair not in tree: " + std::string(pair_id));
}

AttributeTree default_tree() {
    DimensionNode shape{"Shape", {}, std::nullopt};
    shape.children.push_back(leaf(make_pair("RING_CLOSURE", "closed ring", "ring with gap", "Shape", "RING")));
    shape.children.push_back(
        leaf(make_pair("GRID_REGULARITY", "regular grid", "jittered grid", "Shape", "GRID")));

    DimensionNode balance{"Balance", {}, std::nullopt};
    balance.children.push_back(
        leaf(make_pair("CENTER_BALANCE", "centered mass", "off-center mass", std::nullopt, "ALL")));

    DimensionNode layout{"Layout", {std::move(shape), std::move(balance)}, std::nullopt};

    DimensionNode scale{"Scale", {}, std::nullopt};
    scale.children.push_back(
        leaf(make_pair("SPREAD_SCALE", "target dispersion", "mis-dispersed", std::nullopt, "ALL")));
    DimensionNode spread{"Spread", {std::move(scale)}, std::nullopt};

    AttributeTree tree;
    tree.roots.push_back(std::move(layout));
    tree.roots.push_back(std::move(spread));
    tree.max_depth = 3;
    return tree;
}

ValidationReport validate_tree(const AttributeTree& tree) {
    ValidationReport report;
    auto add = [&](const std::string& path, std::string msg) {
        report.violations.push_back({path, std::move(msg)});
    };

    if (tree.max_depth < 2 || tree.max_depth > 5) {
        add("/", "depth limit: max_depth must be in [2, 5], got " + std::to_string(tree.max_depth));
    }
    if (tree.roots.empty()) add("/", "tree has no roots");

    std::set<std::string> node_ids;
    std::set<std::string> pair_ids;
    const int limit = std::clamp(tree.max_depth, 2, 5);

    // over_limit: an ancestor already exceeded the depth limit and was reported.
    std::function<void(const DimensionNode&, const std::string&, int, const DimensionNode*, bool)> visit =
        [&](const DimensionNode& node, const std::string& parent_path, int depth, const DimensionNode* parent,
            bool over_limit) {
            const std::string path = parent_path + "/" + node.id;
            if (node.id.empty()) add(path, "empty id");
            const bool fresh_id = node_ids.insert(node.id).second;
            if (!fresh_id) add(path, "duplicate id: " + node.id);
            if (depth > limit && !over_limit) {
                add(path, "depth limit: node at depth " + std::to_string(depth) + " exceeds " +
                              std::to_string(limit));
                over_limit = true;
            }

            if (node.pair) {
                const LeafPair& p = *node.pair;
                if (!node.children.empty()) add(path, "interior node holds attributes");
                if (p.pair_id != node.id) add(path, "leaf id differs from pair_id " + p.pair_id);
                if (!pair_ids.insert(p.pair_id).second && fresh_id) add(path, "duplicate id: " + p.pair_id);
                if (p.pos_label == p.neg_label) add(path, "pos_label equals neg_label");
                if (!predicate_known(p.applicability_predicate_id)) {
                    add(path, "unknown applicability predicate: " + p.applicability_predicate_id);
                }
                if (p.exclusivity_group && (parent == nullptr || *p.exclusivity_group != parent->id)) {
                    add(path, "exclusivity_group must name the penultimate ancestor");
                }
                if (depth < 2) add(path, "depth limit: leaf at depth " + std::to_string(depth));
            } else if (node.children.empty()) {
                add(path, "leaf without attribute pair");
            }
            for (const auto& c : node.children) visit(c, path, depth + 1, &node, over_limit);
        };

    for (const auto& root : tree.roots) visit(root, "", 1, nullptr, false);
    return report;
}

std::vector<std::string> applicable_pairs(const AttributeTree& tree, Family family) {
    std::vector<std::string> out;
    for (const LeafPair* p : tree.canonical_pairs()) {
        if (predicate_accepts(p->applicability_predicate_id, family)) out.push_back(p->pair_id);
    }
    return out;
}

std::vector<std::string> applicable_pairs(const AttributeTree& tree, std::string_view family) {
    return applicable_pairs(tree, parse_family(family));
}

AttributeSet::AttributeSet(std::initializer_list<AttributeEntry> entries) {
    for (const auto& e : entries) insert(e);
}

AttributeSet AttributeSet::of(Polarity polarity, const std::vector<std::string>& pair_ids) {
    AttributeSet s;
    for (const auto& id : pair_ids) s.insert({id, polarity});
    return s;
}

void AttributeSet::insert(AttributeEntry entry) {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), entry);
    if (it == entries_.end() || *it != entry) entries_.insert(it, std::move(entry));
}

bool AttributeSet::contains(const AttributeEntry& entry) const {
    return std::binary_search(entries_.begin(), entries_.end(), entry);
}

bool AttributeSet::contains_pair(std::string_view pair_id) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.pair_id == pair_id; });
}

std::vector<std::string> AttributeSet::pair_ids() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.pair_id);
    return out;
}

std::vector<ExclusivityConflict> check_exclusivity(const AttributeTree& tree, const AttributeSet& set) {
    std::vector<std::pair<const AttributeEntry*, const LeafPair*>> positives;
    for (const auto& e : set) {
        const LeafPair* p = tree.find_pair(e.pair_id);
        if (p == nullptr) throw ValidationError("dangling pair_id: " + e.pair_id);
        if (e.polarity == Polarity::Pos) positives.emplace_back(&e, p);
    }
    std::vector<ExclusivityConflict> conflicts;
    for (std::size_t i = 0; i < positives.size(); ++i) {
        for (std::size_t j = i + 1; j < positives.size(); ++j) {
            const auto& gi = positives[i].second->exclusivity_group;
            const auto& gj = positives[j].second->exclusivity_group;
            if (gi && gj && *gi == *gj) {
                conflicts.push_back({*gi, positives[i].first->pair_id, positives[j].first->pair_id});
            }
        }
    }
    return conflicts;
}

ConditionVocabulary::ConditionVocabulary(const AttributeTree& tree) {
    for (const LeafPair* p : tree.canonical_pairs()) {
        offset_.emplace(p->pair_id, pair_ids_.size());
        pair_ids_.push_back(p->pair_id);
    }
}

std::size_t ConditionVocabulary::family_index(Family f) const {
    return static_cast<std::size_t>(f);
}

std::size_t ConditionVocabulary::pos_index(std::string_view pair_id) const {
    auto it = offset_.find(pair_id);
    if (it == offset_.end()) throw ValidationError("unknown pair_id: " + std::string(pair_id));
    return pos_begin() + it->second;
}

std::size_t ConditionVocabulary::neg_index(std::string_view pair_id) const {
    auto it = offset_.find(pair_id);
    if (it == offset_.end()) throw ValidationError("unknown pair_id: " + std::string(pair_id));
    return neg_begin() + it->second;
}

ConditionVector encode_condition(const ConditionVocabulary& vocab, std::optional<Family> y,
                                 const AttributeSet& a_pos, const AttributeSet& a_neg) {
    ConditionVector c(vocab.width(), 0.0);
    if (y) c[vocab.family_index(*y)] = 1.0;
    for (const auto& e : a_pos) {
        if (e.polarity != Polarity::Pos) throw ValidationError("A_pos holds NEG entry " + e.pair_id);
        c[vocab.pos_index(e.pair_id)] = 1.0;
    }
    for (const auto& e : a_neg) {
        if (e.polarity != Polarity::Neg) throw ValidationError("A_neg holds POS entry " + e.pair_id);
        c[vocab.neg_index(e.pair_id)] = 1.0;
    }
    return c;
}

namespace {

json node_to_json(const DimensionNode& n) {
    json j;
    j["id"] = n.id;
    if (n.pair) {
        const LeafPair& p = *n.pair;
        json pj;
        pj["pair_id"] = p.pair_id;
        pj["pos_label"] = p.pos_label;
        pj["neg_label"] = p.neg_label;
        pj["exclusivity_group"] = p.exclusivity_group ? json(*p.exclusivity_group) : json(nullptr);
        pj["applicability_predicate_id"] = p.applicability_predicate_id;
        j["pair"] = std::move(pj);
    } else {
        json children = json::array();
        for (const auto& c : n.children) children.push_back(node_to_json(c));
        j["children"] = std::move(children);
    }
    return j;
}

DimensionNode node_from_json(const json& j) {
    DimensionNode n;
    n.id = j.at("id").get<std::string>();
    if (j.contains("children")) {
        for (const auto& c : j.at("children")) n.children.push_back(node_from_json(c));
    }
    if (j.contains("pair") && !j.at("pair").is_null()) {
        const json& pj = j.at("pair");
        LeafPair p;
        p.pair_id = pj.at("pair_id").get<std::string>();
        p.pos_label = pj.at("pos_label").get<std::string>();
        p.neg_label = pj.at("neg_label").get<std::string>();
        if (pj.contains("exclusivity_group") && !pj.at("exclusivity_group").is_null()) {
            p.exclusivity_group = pj.at("exclusivity_group").get<std::string>();
        }
        p.applicability_predicate_id = pj.value("applicability_predicate_id", std::string("ALL"));
        n.pair = std::move(p);
    }
    return n;
}

}  // namespace

json tree_to_json(const AttributeTree& tree) {
    json roots = json::array();
    for (const auto& r : tree.roots) roots.push_back(node_to_json(r));
    return json{{"max_depth", tree.max_depth}, {"roots", std::move(roots)}};
}

AttributeTree tree_from_json(const json& doc) {
    try {
        AttributeTree tree;
        tree.max_depth = doc.value("max_depth", 5);
        for (const auto& r : doc.at("roots")) tree.roots.push_back(node_from_json(r));
        return tree;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed tree document: ") + e.what());
    }
}

AttributeTree load_tree(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open tree file: " + path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("malformed tree file " + path + ": " + e.what());
    }
    return tree_from_json(doc);
}

void save_tree(const std::string& path, const AttributeTree& tree) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write tree file: " + path);
    out << tree_to_json(tree).dump(2) << '\n';
}

std::string tree_hash(const AttributeTree& tree) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(tree_to_json(tree).dump())));
    return buf;
}

}  // namespace cpolab
