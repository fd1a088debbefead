use std::path::{Path, PathBuf};

use aspectree::scoring::ConsistencyMatrix;
use aspectree::tree::{ConceptTree, NodeStatus, ROOT_ID};
use aspectree::SplitDecision;
use serde_json::json;

pub fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

pub fn decision_name(d: SplitDecision) -> &'static str {
    match d {
        SplitDecision::SplitOk => "split-ok",
        SplitDecision::LeafIncoherent => "leaf-incoherent",
        SplitDecision::LeafNotDistinct => "leaf-not-distinct",
        SplitDecision::RolledBack => "rolled-back",
    }
}

fn status_name(s: NodeStatus) -> &'static str {
    match s {
        NodeStatus::Root => "root",
        NodeStatus::Active => "active",
        NodeStatus::LeafStopped => "stopped",
        NodeStatus::LeafIncoherent => "incoherent",
    }
}

pub fn print_tree(tree: &ConceptTree, archive: &Path, json: bool) {
    if json {
        let nodes: Vec<_> = tree
            .nodes
            .values()
            .map(|n| {
                json!({
                    "id": n.id,
                    "token": n.token,
                    "parent": n.parent,
                    "depth": n.depth,
                    "status": n.status,
                    "self_consistency": n.self_consistency,
                    "sibling_cross_consistency": n.sibling_cross_consistency,
                })
            })
            .collect();
        let log: Vec<_> = tree
            .build_log
            .iter()
            .map(|r| json!({ "parent_id": r.parent_id, "decision": r.decision, "chosen_seed": r.chosen_seed, "children": r.children }))
            .collect();
        print_json(&json!({ "tree_id": tree.tree_id, "archive": archive, "nodes": nodes, "build_log": log }));
        return;
    }
    println!("{} ({} nodes) -> {}", tree.tree_id, tree.nodes.len(), archive.display());
    print_subtree(tree, ROOT_ID, "", "");
}

fn print_subtree(tree: &ConceptTree, id: u32, lead: &str, rest: &str) {
    let n = tree.node(id).expect("linked node");
    let scores = match (n.self_consistency, n.sibling_cross_consistency) {
        (Some(s), Some(c)) => format!("  self {s:.3}  cross {c:.3}"),
        _ => String::new(),
    };
    let token = n.token.as_deref().map(|t| format!(" <{t}>")).unwrap_or_default();
    println!("{lead}v{id}{token} {}{scores}", status_name(n.status));
    for (i, &c) in n.children.iter().enumerate() {
        let last = i + 1 == n.children.len();
        let (l, r) = if last { ("└─ ", "   ") } else { ("├─ ", "│  ") };
        print_subtree(tree, c, &format!("{rest}{l}"), &format!("{rest}{r}"));
    }
}

pub fn print_generated(prompt: &str, files: &[PathBuf], json: bool) {
    if json {
        print_json(&json!({ "prompt": prompt, "images": files }));
    } else {
        println!("{prompt}");
        for f in files {
            println!("  {}", f.display());
        }
    }
}

pub fn print_matrix(m: &ConsistencyMatrix) {
    print!("{:>6}", "");
    for l in &m.labels {
        print!("{l:>7}");
    }
    println!();
    for (i, l) in m.labels.iter().enumerate() {
        print!("{l:>6}");
        for j in 0..m.labels.len() {
            print!("{:>7.3}", m.get(i, j));
        }
        println!();
    }
}
