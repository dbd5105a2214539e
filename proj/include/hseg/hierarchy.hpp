#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hseg {

enum class AnnotationType { Dense, Bbox, Mixed };

std::string annotation_name(AnnotationType t);
AnnotationType annotation_from_name(const std::string& s);

// One concept in the label tree. Nodes are stored in depth-first preorder;
// the root has index 0 and level 0, its children level 1.
struct ConceptNode {
  std::string name;
  int index = 0;
  int level = 0;
  int parent = -1;
  int child_slot = -1;  // position among the parent's children
  std::vector<int> children;
  int classifier = -1;  // id if this inner node defines a classifier
};

// A classifier decides the children of its owning inner node. Its level is
// the level of the classes it decides (root classifier = level 1).
struct ClassifierInfo {
  int id = -1;
  int node = -1;
  int level = 1;
  int num_classes = 0;
  int parent_classifier = -1;  // nearest classifier above; -1 for the root
  int parent_class = -1;       // class index in the parent leading here
};

struct PathStep {
  int classifier;
  int class_index;
  bool operator==(const PathStep&) const = default;
};
// Root-to-node chain of (classifier, class) decisions; empty for the root.
using LabelPath = std::vector<PathStep>;

struct Binding {
  int label_id;
  int node;
};

struct LabelHierarchy {
  std::vector<ConceptNode> nodes;
  std::vector<ClassifierInfo> classifiers;
  // dataset name -> label-id bindings, in document order
  std::map<std::string, std::vector<Binding>> dataset_bindings;

  const ConceptNode& root() const { return nodes.front(); }
  int find(const std::string& name) const;  // node index or -1
  int node_of(const std::string& dataset, int label_id) const;  // -1 if unbound
  int max_level() const;
  // number of label classes = every node except the root
  int num_classes() const { return static_cast<int>(nodes.size()) - 1; }
  int num_leaves() const;
  bool is_ancestor(int ancestor, int node) const;
  // class index of `node`'s subtree within classifier `j`, or -1 when the
  // classifier is not on the root-to-node path
  int class_toward(int classifier_id, int node) const;
  int ancestor_at_level(int node, int level) const;
};

// Parses the indentation-based tree document (2-space indent per level)
// followed by optional `[bind <dataset>]` sections of `label_id node_name`
// lines. Throws Error with a line number on malformed input.
LabelHierarchy parse_hierarchy(const std::string& text);
LabelHierarchy load_hierarchy(const std::string& path);

// Canonical text form; parse(serialize(h)) reproduces an identical tree.
std::string serialize_hierarchy(const LabelHierarchy& h);

// Registers dataset labels against node names. Unknown names are rejected
// with nearest-name suggestions; a label id may bind to only one node.
void bind_dataset(LabelHierarchy& h, const std::string& dataset,
                  const std::vector<std::pair<int, std::string>>& labels);

struct DatasetInfo {
  std::string name;
  AnnotationType annotation = AnnotationType::Dense;
};

struct ValidationIssue {
  std::string rule;   // e.g. "root coverage", "degenerate classifier"
  std::string node;   // offending node or dataset
  std::string message;
};

struct SupervisionEntry {
  int classifier = -1;
  std::string dataset;
  AnnotationType annotation;
  std::vector<std::string> bound_nodes;  // bindings that reach this classifier
};

struct ValidationReport {
  std::vector<ValidationIssue> errors;
  std::vector<SupervisionEntry> supervision;
  bool ok() const { return errors.empty(); }
  std::string to_string(const LabelHierarchy& h) const;
};

// Checks the structural invariants and the per-pixel coverage constraint of
// the root classifier. A failed report blocks training.
ValidationReport validate(const LabelHierarchy& h, const std::vector<DatasetInfo>& datasets);

LabelPath path_encode(const LabelHierarchy& h, int node);

// Union of all bound nodes in preorder; the flat-baseline label space.
struct FlatSpace {
  std::vector<int> nodes;
  bool with_unlabeled = false;
  int size() const { return static_cast<int>(nodes.size()) + (with_unlabeled ? 1 : 0); }
  int unlabeled_index() const { return with_unlabeled ? static_cast<int>(nodes.size()) : -1; }
  int index_of(int node) const;  // -1 if not in the space
};

FlatSpace flatten_union(const LabelHierarchy& h, bool with_unlabeled = false);

// Human-readable tree + classifier + binding listing (inspect-hierarchy).
std::string describe_hierarchy(const LabelHierarchy& h);

}  // namespace hseg
