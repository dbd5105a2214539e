#include "hseg/hierarchy.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "hseg/util.hpp"

namespace hseg {

std::string annotation_name(AnnotationType t) {
  switch (t) {
    case AnnotationType::Dense: return "dense";
    case AnnotationType::Bbox: return "bbox";
    case AnnotationType::Mixed: return "mixed";
  }
  return "?";
}

AnnotationType annotation_from_name(const std::string& s) {
  if (s == "dense") return AnnotationType::Dense;
  if (s == "bbox") return AnnotationType::Bbox;
  if (s == "mixed") return AnnotationType::Mixed;
  throw Error("unknown annotation type: '" + s + "' (expected dense|bbox|mixed)");
}

int LabelHierarchy::find(const std::string& name) const {
  for (const auto& n : nodes) {
    if (n.name == name) return n.index;
  }
  return -1;
}

int LabelHierarchy::node_of(const std::string& dataset, int label_id) const {
  auto it = dataset_bindings.find(dataset);
  if (it == dataset_bindings.end()) return -1;
  for (const auto& b : it->second) {
    if (b.label_id == label_id) return b.node;
  }
  return -1;
}

int LabelHierarchy::max_level() const {
  int m = 0;
  for (const auto& n : nodes) m = std::max(m, n.level);
  return m;
}

int LabelHierarchy::num_leaves() const {
  int m = 0;
  for (const auto& n : nodes) {
    if (n.children.empty()) ++m;
  }
  return m;
}

bool LabelHierarchy::is_ancestor(int ancestor, int node) const {
  int cur = node;
  while (cur != -1) {
    if (cur == ancestor) return true;
    cur = nodes[static_cast<size_t>(cur)].parent;
  }
  return false;
}

int LabelHierarchy::class_toward(int classifier_id, int node) const {
  const auto& cls = classifiers.at(static_cast<size_t>(classifier_id));
  int cur = node;
  while (cur != -1) {
    const auto& n = nodes[static_cast<size_t>(cur)];
    if (n.parent == cls.node) return n.child_slot;
    cur = n.parent;
  }
  return -1;
}

int LabelHierarchy::ancestor_at_level(int node, int level) const {
  int cur = node;
  while (cur != -1 && nodes[static_cast<size_t>(cur)].level > level) {
    cur = nodes[static_cast<size_t>(cur)].parent;
  }
  if (cur == -1 || nodes[static_cast<size_t>(cur)].level != level) return -1;
  return cur;
}

int FlatSpace::index_of(int node) const {
  for (size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i] == node) return static_cast<int>(i);
  }
  return -1;
}

namespace {

struct ParseError : Error {
  ParseError(int line, const std::string& msg)
      : Error(strprintf("hierarchy parse error, line %d: %s", line, msg.c_str())) {}
};

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'))
      return false;
  }
  return true;
}

int edit_distance(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= b.size(); ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void derive_classifiers(LabelHierarchy& h) {
  h.classifiers.clear();
  for (auto& n : h.nodes) n.classifier = -1;
  for (auto& n : h.nodes) {
    if (n.children.size() >= 2) {
      ClassifierInfo c;
      c.id = static_cast<int>(h.classifiers.size());
      c.node = n.index;
      c.level = n.level + 1;
      c.num_classes = static_cast<int>(n.children.size());
      n.classifier = c.id;
      h.classifiers.push_back(c);
    }
  }
  for (auto& c : h.classifiers) {
    int cur = h.nodes[static_cast<size_t>(c.node)].parent;
    int from = c.node;
    while (cur != -1) {
      const auto& anc = h.nodes[static_cast<size_t>(cur)];
      if (anc.classifier != -1) {
        c.parent_classifier = anc.classifier;
        c.parent_class = h.nodes[static_cast<size_t>(from)].child_slot;
        break;
      }
      from = cur;
      cur = anc.parent;
    }
  }
}

}  // namespace

LabelHierarchy parse_hierarchy(const std::string& text) {
  LabelHierarchy h;
  std::vector<int> stack;  // node index per depth
  std::string bind_section;
  std::vector<std::pair<int, std::string>> bind_labels;
  int bind_line = 0;
  bool any_tree_line = false;

  auto flush_bind = [&]() {
    if (bind_section.empty()) return;
    if (bind_labels.empty()) {
      throw ParseError(bind_line, "empty bind section for dataset '" + bind_section + "'");
    }
    try {
      bind_dataset(h, bind_section, bind_labels);
    } catch (const Error& e) {
      throw ParseError(bind_line, e.what());
    }
    bind_section.clear();
    bind_labels.clear();
  };

  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    if (line.find('\t') != std::string::npos) {
      throw ParseError(lineno, "tabs are not allowed; indent with 2 spaces per level");
    }

    std::string t = trim(line);
    if (t.front() == '[') {
      // bind section header
      if (t.back() != ']') throw ParseError(lineno, "unterminated section header");
      std::string inner = trim(t.substr(1, t.size() - 2));
      auto parts = split(inner, ' ');
      if (parts.size() != 2 || parts[0] != "bind" || !valid_name(parts[1])) {
        throw ParseError(lineno, "expected [bind <dataset>] section header");
      }
      flush_bind();
      bind_section = parts[1];
      bind_line = lineno;
      continue;
    }

    if (!bind_section.empty()) {
      std::istringstream ls(t);
      long id = -1;
      std::string node_name, extra;
      if (!(ls >> id >> node_name) || (ls >> extra)) {
        throw ParseError(lineno, "expected '<label_id> <node_name>'");
      }
      if (id < 0 || id > 254) {
        throw ParseError(lineno, strprintf("label id %ld out of range [0, 254]", id));
      }
      bind_labels.emplace_back(static_cast<int>(id), node_name);
      continue;
    }

    // tree line
    size_t spaces = 0;
    while (spaces < line.size() && line[spaces] == ' ') ++spaces;
    if (spaces % 2 != 0) throw ParseError(lineno, "odd indentation; use 2 spaces per level");
    int depth = static_cast<int>(spaces / 2);
    std::string name = trim(line);
    if (!valid_name(name) || name.find(' ') != std::string::npos) {
      throw ParseError(lineno, "invalid node name '" + name + "'");
    }
    if (depth > static_cast<int>(stack.size())) {
      throw ParseError(lineno, strprintf("indentation jumps %d levels", depth - static_cast<int>(stack.size()) + 1));
    }
    if (depth == 0 && any_tree_line) {
      throw ParseError(lineno, "multiple root nodes; the document must define a single tree");
    }
    if (h.find(name) != -1) throw ParseError(lineno, "duplicate node name '" + name + "'");

    ConceptNode node;
    node.name = name;
    node.index = static_cast<int>(h.nodes.size());
    node.level = depth;
    if (depth > 0) {
      int parent = stack[static_cast<size_t>(depth - 1)];
      node.parent = parent;
      node.child_slot = static_cast<int>(h.nodes[static_cast<size_t>(parent)].children.size());
      h.nodes[static_cast<size_t>(parent)].children.push_back(node.index);
    }
    h.nodes.push_back(node);
    stack.resize(static_cast<size_t>(depth));
    stack.push_back(node.index);
    any_tree_line = true;
  }
  flush_bind();

  if (h.nodes.empty()) throw ParseError(lineno == 0 ? 1 : lineno, "document defines no nodes");
  derive_classifiers(h);
  return h;
}

LabelHierarchy load_hierarchy(const std::string& path) {
  return parse_hierarchy(read_text_file(path));
}

std::string serialize_hierarchy(const LabelHierarchy& h) {
  std::ostringstream out;
  for (const auto& n : h.nodes) {
    out << std::string(static_cast<size_t>(n.level) * 2, ' ') << n.name << "\n";
  }
  for (const auto& [dataset, bindings] : h.dataset_bindings) {
    out << "\n[bind " << dataset << "]\n";
    auto sorted = bindings;
    std::sort(sorted.begin(), sorted.end(),
              [](const Binding& a, const Binding& b) { return a.label_id < b.label_id; });
    for (const auto& b : sorted) {
      out << b.label_id << " " << h.nodes[static_cast<size_t>(b.node)].name << "\n";
    }
  }
  return out.str();
}

void bind_dataset(LabelHierarchy& h, const std::string& dataset,
                  const std::vector<std::pair<int, std::string>>& labels) {
  auto& bindings = h.dataset_bindings[dataset];
  for (const auto& [id, name] : labels) {
    int node = h.find(name);
    if (node == -1) {
      // rank nodes by edit distance for the diagnostic
      std::vector<std::pair<int, std::string>> ranked;
      for (const auto& n : h.nodes) ranked.emplace_back(edit_distance(name, n.name), n.name);
      std::sort(ranked.begin(), ranked.end());
      std::string suggestions;
      for (size_t i = 0; i < ranked.size() && i < 3; ++i) {
        if (i) suggestions += ", ";
        suggestions += ranked[i].second;
      }
      throw Error(strprintf("dataset '%s': label %d names unknown node '%s' (closest: %s)",
                            dataset.c_str(), id, name.c_str(), suggestions.c_str()));
    }
    for (const auto& b : bindings) {
      if (b.label_id == id && b.node != node) {
        throw Error(strprintf("dataset '%s': label %d bound to two nodes ('%s' and '%s')",
                              dataset.c_str(), id,
                              h.nodes[static_cast<size_t>(b.node)].name.c_str(), name.c_str()));
      }
      if (b.label_id == id) {
        throw Error(strprintf("dataset '%s': label %d bound twice", dataset.c_str(), id));
      }
    }
    bindings.push_back({id, node});
  }
}

ValidationReport validate(const LabelHierarchy& h, const std::vector<DatasetInfo>& datasets) {
  ValidationReport rep;
  auto issue = [&](const std::string& rule, const std::string& node, const std::string& msg) {
    rep.errors.push_back({rule, node, msg});
  };

  if (h.nodes.empty()) {
    issue("empty tree", "", "hierarchy has no nodes");
    return rep;
  }

  // structural: inner nodes with a single child cannot carry a classifier
  for (const auto& n : h.nodes) {
    if (n.children.size() == 1) {
      issue("degenerate classifier", n.name,
            strprintf("inner node '%s' has a single child; a classifier needs at least 2 classes",
                      n.name.c_str()));
    }
  }
  if (h.root().children.empty()) {
    issue("degenerate classifier", h.root().name, "root has no children");
  }

  for (const auto& d : datasets) {
    auto it = h.dataset_bindings.find(d.name);
    if (it == h.dataset_bindings.end() || it->second.empty()) {
      issue("missing bindings", d.name, "dataset '" + d.name + "' has no label bindings");
    }
  }

  // per-classifier supervision listing
  for (const auto& c : h.classifiers) {
    for (const auto& d : datasets) {
      auto it = h.dataset_bindings.find(d.name);
      if (it == h.dataset_bindings.end()) continue;
      SupervisionEntry entry;
      entry.classifier = c.id;
      entry.dataset = d.name;
      entry.annotation = d.annotation;
      for (const auto& b : it->second) {
        if (h.class_toward(c.id, b.node) != -1) {
          entry.bound_nodes.push_back(h.nodes[static_cast<size_t>(b.node)].name);
        }
      }
      if (!entry.bound_nodes.empty()) rep.supervision.push_back(std::move(entry));
    }
  }

  // every root-classifier class needs at least one per-pixel-annotated binding
  for (int child : h.root().children) {
    bool covered = false;
    for (const auto& d : datasets) {
      if (d.annotation == AnnotationType::Bbox) continue;
      auto it = h.dataset_bindings.find(d.name);
      if (it == h.dataset_bindings.end()) continue;
      for (const auto& b : it->second) {
        if (h.is_ancestor(child, b.node)) {
          covered = true;
          break;
        }
      }
      if (covered) break;
    }
    if (!covered) {
      issue("root coverage", h.nodes[static_cast<size_t>(child)].name,
            strprintf("root class '%s' has no per-pixel annotated dataset binding",
                      h.nodes[static_cast<size_t>(child)].name.c_str()));
    }
  }

  return rep;
}

std::string ValidationReport::to_string(const LabelHierarchy& h) const {
  std::ostringstream out;
  if (ok()) {
    out << "validation OK\n";
  } else {
    out << "validation FAILED\n";
    for (const auto& e : errors) {
      out << "  [" << e.rule << "] " << e.node << ": " << e.message << "\n";
    }
  }
  for (const auto& s : supervision) {
    const auto& c = h.classifiers[static_cast<size_t>(s.classifier)];
    out << "  classifier " << c.id << " (" << h.nodes[static_cast<size_t>(c.node)].name
        << "): supervised by " << s.dataset << " [" << annotation_name(s.annotation) << "] via";
    for (const auto& n : s.bound_nodes) out << " " << n;
    out << "\n";
  }
  return out.str();
}

LabelPath path_encode(const LabelHierarchy& h, int node) {
  if (node < 0 || node >= static_cast<int>(h.nodes.size())) {
    throw Error(strprintf("path_encode: node index %d out of range", node));
  }
  // collect the chain root -> node, then emit one step per classifier
  std::vector<int> chain;
  for (int cur = node; cur != -1; cur = h.nodes[static_cast<size_t>(cur)].parent) {
    chain.push_back(cur);
  }
  std::reverse(chain.begin(), chain.end());
  LabelPath path;
  for (size_t i = 0; i + 1 < chain.size(); ++i) {
    const auto& parent = h.nodes[static_cast<size_t>(chain[i])];
    const auto& child = h.nodes[static_cast<size_t>(chain[i + 1])];
    if (parent.classifier != -1) {
      path.push_back({parent.classifier, child.child_slot});
    }
  }
  return path;
}

FlatSpace flatten_union(const LabelHierarchy& h, bool with_unlabeled) {
  FlatSpace space;
  space.with_unlabeled = with_unlabeled;
  std::vector<bool> bound(h.nodes.size(), false);
  for (const auto& [dataset, bindings] : h.dataset_bindings) {
    for (const auto& b : bindings) bound[static_cast<size_t>(b.node)] = true;
  }
  for (const auto& n : h.nodes) {  // nodes are stored in preorder
    if (bound[static_cast<size_t>(n.index)]) space.nodes.push_back(n.index);
  }
  return space;
}

std::string describe_hierarchy(const LabelHierarchy& h) {
  std::ostringstream out;
  for (const auto& n : h.nodes) {
    out << std::string(static_cast<size_t>(n.level) * 2, ' ') << n.name << "  [level " << n.level;
    if (n.classifier != -1) {
      out << ", classifier " << n.classifier << " over " << n.children.size() << " classes";
    }
    out << "]\n";
  }
  out << "\nclasses: " << h.num_classes() << "  leaves: " << h.num_leaves()
      << "  classifiers: " << h.classifiers.size() << "\n";
  for (const auto& c : h.classifiers) {
    out << "  classifier " << c.id << ": node " << h.nodes[static_cast<size_t>(c.node)].name
        << ", level " << c.level << ", classes " << c.num_classes;
    if (c.parent_classifier != -1) {
      out << ", parent " << c.parent_classifier << " class " << c.parent_class;
    }
    out << "\n";
  }
  for (const auto& [dataset, bindings] : h.dataset_bindings) {
    out << "\n[bind " << dataset << "]  (" << bindings.size() << " labels)\n";
    for (const auto& b : bindings) {
      out << "  " << b.label_id << " -> " << h.nodes[static_cast<size_t>(b.node)].name << "\n";
    }
  }
  return out.str();
}

}  // namespace hseg
