use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::split::{EdgeSplit, SplitPart};
use super::{KnowledgeGraph, NodeRecord, Triple};
use crate::error::{Error, Result};

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Data lines after the mandatory header row, with 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_id(path: &Path, line: usize, field: &str, what: &str) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::load(path, line, format!("{what} `{field}` is not a non-negative integer")))
}

fn parse_nodes(path: &Path, text: &str) -> Result<Vec<NodeRecord>> {
    if text.lines().next().is_none() {
        return Err(Error::load(path, 1, "missing header row"));
    }
    let mut nodes = Vec::new();
    for (line, row) in data_lines(text) {
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::load(
                path,
                line,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let id = parse_id(path, line, fields[0], "node_id")?;
        let subtype = match fields[3].trim() {
            "" => None,
            s => Some(s.to_string()),
        };
        nodes.push(NodeRecord {
            id,
            external_id: fields[1].to_string(),
            node_type: fields[2].parse().unwrap(),
            subtype,
            name: fields[4].to_string(),
        });
    }
    nodes.sort_by_key(|n| n.id);
    for (i, n) in nodes.iter().enumerate() {
        if n.id != i {
            return Err(Error::data(format!(
                "{}: node ids must cover 0..{} exactly; id {} is missing or duplicated",
                path.display(),
                nodes.len(),
                i
            )));
        }
    }
    Ok(nodes)
}

/// Loads `nodes.tsv` and `triples.tsv` (both with a header row).
pub fn load_graph(node_path: &Path, triple_path: &Path) -> Result<KnowledgeGraph> {
    let nodes = parse_nodes(node_path, &read_to_string(node_path)?)?;
    let text = read_to_string(triple_path)?;
    if text.lines().next().is_none() {
        return Err(Error::load(triple_path, 1, "missing header row"));
    }
    let n = nodes.len();
    let mut relations: Vec<String> = Vec::new();
    let mut relation_ids: HashMap<String, usize> = HashMap::new();
    let mut triples = Vec::new();
    for (line, row) in data_lines(&text) {
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::load(
                triple_path,
                line,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let head = parse_id(triple_path, line, fields[0], "head_id")?;
        let tail = parse_id(triple_path, line, fields[2], "tail_id")?;
        for (id, role) in [(head, "head"), (tail, "tail")] {
            if id >= n {
                return Err(Error::load(
                    triple_path,
                    line,
                    format!("{role} node {id} does not exist (graph has {n} nodes)"),
                ));
            }
        }
        let name = fields[1].trim();
        if name.is_empty() {
            return Err(Error::load(triple_path, line, "empty relation name"));
        }
        let relation = *relation_ids.entry(name.to_string()).or_insert_with(|| {
            relations.push(name.to_string());
            relations.len() - 1
        });
        triples.push(Triple::new(head, relation, tail));
    }
    let graph = KnowledgeGraph::new(nodes, relations, triples)?;
    log::info!(
        "loaded graph: {} nodes, {} relations, {} triples ({} duplicates dropped)",
        graph.num_nodes(),
        graph.num_relations(),
        graph.num_triples(),
        graph.duplicates_dropped()
    );
    Ok(graph)
}

pub fn write_nodes(graph: &KnowledgeGraph, path: &Path) -> Result<()> {
    let mut out = String::from("node_id\texternal_id\tnode_type\tsubtype\tname\n");
    for n in graph.nodes() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            n.id,
            n.external_id,
            n.node_type,
            n.subtype.as_deref().unwrap_or(""),
            n.name
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_triples(graph: &KnowledgeGraph, path: &Path) -> Result<()> {
    let mut out = String::from("head_id\trelation_name\ttail_id\n");
    for t in graph.triples() {
        let _ = writeln!(out, "{}\t{}\t{}", t.head, graph.relation_name(t.relation), t.tail);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_split(split: &EdgeSplit, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# seed={}", split.seed);
    let _ = writeln!(
        out,
        "# ratios={},{},{}",
        split.ratios[0], split.ratios[1], split.ratios[2]
    );
    let mut rows: Vec<(usize, SplitPart)> = Vec::with_capacity(split.total());
    for part in SplitPart::ALL {
        rows.extend(split.part(part).iter().map(|&i| (i, part)));
    }
    rows.sort_unstable_by_key(|r| r.0);
    for (i, part) in rows {
        let _ = writeln!(out, "{i}\t{}", part.as_str());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a split file and checks it covers `0..num_triples` exactly once.
pub fn read_split(path: &Path, num_triples: usize) -> Result<EdgeSplit> {
    let text = read_to_string(path)?;
    let mut seed = None;
    let mut ratios = None;
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut seen = vec![false; num_triples];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        if let Some(comment) = row.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("seed=") {
                seed = Some(v.parse().map_err(|_| Error::load(path, line, "bad seed"))?);
            } else if let Some(v) = comment.strip_prefix("ratios=") {
                let vals: Vec<f64> = v
                    .split(',')
                    .map(|x| x.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::load(path, line, "bad ratios"))?;
                if vals.len() != 3 {
                    return Err(Error::load(path, line, "ratios need three values"));
                }
                ratios = Some([vals[0], vals[1], vals[2]]);
            }
            continue;
        }
        let (idx, part) = row
            .split_once('\t')
            .ok_or_else(|| Error::load(path, line, "expected `triple_index<TAB>part`"))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::load(path, line, "bad triple index"))?;
        let part: SplitPart = part
            .trim()
            .parse()
            .map_err(|e: String| Error::load(path, line, e))?;
        if idx >= num_triples {
            return Err(Error::load(
                path,
                line,
                format!("triple index {idx} out of range (graph has {num_triples} triples)"),
            ));
        }
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::load(path, line, format!("triple index {idx} listed twice")));
        }
        parts[part as usize].push(idx);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::data(format!(
            "{}: triple {missing} is not assigned to any part",
            path.display()
        )));
    }
    let [train, valid, test] = parts;
    Ok(EdgeSplit {
        train,
        valid,
        test,
        seed: seed.ok_or_else(|| Error::data(format!("{}: missing `# seed=` line", path.display())))?,
        ratios: ratios
            .ok_or_else(|| Error::data(format!("{}: missing `# ratios=` line", path.display())))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{split_edges, NodeType};

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const NODES: &str = "node_id\texternal_id\tnode_type\tsubtype\tname\n\
        0\tDB001\tdrug\tmolecule\taspirin\n\
        1\tP1\tgene/protein\t\tTP53\n\
        2\tD9\tdisease\t\tcancer\n";

    #[test]
    fn loads_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "nodes.tsv", NODES);
        let t = write(
            dir.path(),
            "triples.tsv",
            "head_id\trelation_name\ttail_id\n0\tdrug_protein\t1\n1\tprotein_disease\t2\n",
        );
        let g = load_graph(&n, &t).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_triples(), 2);
        assert_eq!(g.node(0).subtype.as_deref(), Some("molecule"));
        assert_eq!(g.node(1).subtype, None);
        assert_eq!(g.node_type(1), &NodeType::GeneProtein);
    }

    #[test]
    fn duplicate_triple_rows() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "nodes.tsv", NODES);
        let t = write(
            dir.path(),
            "triples.tsv",
            "head_id\trelation_name\ttail_id\n0\tr\t1\n0\tr\t1\n",
        );
        let g = load_graph(&n, &t).unwrap();
        assert_eq!(g.num_triples(), 1);
        assert_eq!(g.duplicates_dropped(), 1);
    }

    #[test]
    fn unknown_node_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "nodes.tsv", NODES);
        let t = write(
            dir.path(),
            "triples.tsv",
            "head_id\trelation_name\ttail_id\n0\tr\t1\n0\tr\t7\n",
        );
        match load_graph(&n, &t) {
            Err(Error::Load { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains('7'), "{message}");
            }
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "nodes.tsv", "h\n0\tX\tdrug\n");
        let t = write(dir.path(), "triples.tsv", "h\n");
        assert!(matches!(load_graph(&n, &t), Err(Error::Load { line: 2, .. })));
    }

    #[test]
    fn serialize_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = crate::graph::fixtures::small_graph();
        let n = dir.path().join("n.tsv");
        let t = dir.path().join("t.tsv");
        write_nodes(&g, &n).unwrap();
        write_triples(&g, &t).unwrap();
        let back = load_graph(&n, &t).unwrap();
        assert_eq!(back.nodes(), g.nodes());
        assert_eq!(back.relations(), g.relations());
        assert_eq!(back.triples(), g.triples());
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = crate::graph::fixtures::small_graph();
        let s = split_edges(&g, [0.6, 0.2, 0.2], 11).unwrap();
        let p = dir.path().join("split.tsv");
        write_split(&s, &p).unwrap();
        let back = read_split(&p, g.num_triples()).unwrap();
        assert_eq!(back.seed, 11);
        assert_eq!(back, s);
    }
}
