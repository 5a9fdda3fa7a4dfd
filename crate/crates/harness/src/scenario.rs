//! Line-oriented scenario scripts.
//!
//! A script declares nodes and resources, then runs flows with expected
//! outcomes and asserts final provenance sets. Example:
//!
//! ```text
//! node alpha
//! node beta
//! process server @alpha
//! file secret @alpha /srv/secret.html
//! stream chan_a @alpha <-> chan_b @beta
//! policy secret confidential
//! flow secret -> server expect grant
//! flow server -> chan_a expect deny local_confidentiality
//! prov server = secret
//! ```
//!
//! Everything is deterministic: synthetic pids count up from 4000 and
//! stream sockets come from the cluster's fixed per-node allocator, so
//! two runs of the same script produce identical reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use flowtrace_core::proto::GrantMsg;
use flowtrace_core::{ComplianceFlags, FlowOutcome, ResourceId};
use flowtrace_shim::MiddlewareClient;

use crate::cluster::Cluster;
use crate::HarnessError;

const FIRST_SYNTHETIC_PID: u32 = 4000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    Grant,
    Deny(String),
    Timeout,
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::Grant => f.write_str("granted"),
            Expectation::Deny(policy) => write!(f, "denied by {policy}"),
            Expectation::Timeout => f.write_str("timed out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamFar {
    Node { name: String, node: String },
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    DeclProcess {
        name: String,
        node: String,
    },
    DeclFile {
        name: String,
        node: String,
        path: String,
    },
    DeclStream {
        name: String,
        node: String,
        far: StreamFar,
    },
    Policy {
        resource: String,
        flags: ComplianceFlags,
    },
    Flow {
        source: String,
        destination: String,
        expect: Expectation,
        outcome: FlowOutcome,
    },
    Prov {
        resource: String,
        expected: Vec<String>,
    },
}

/// A parsed script: the declared nodes plus every directive in file
/// order. Declarations, policies, flows, and assertions may interleave.
#[derive(Debug, Clone, Default)]
pub struct ScenarioSpec {
    pub nodes: Vec<String>,
    pub items: Vec<Item>,
}

/// Outcome of one run: the report lines in script order and how many of
/// them recorded a mismatch.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub lines: Vec<String>,
    pub mismatches: usize,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }

    pub fn render(&self) -> String {
        let mut out = format!("scenario: {}\n", self.name);
        for line in &self.lines {
            out.push_str(line);
            out.push('\n');
        }
        if self.passed() {
            out.push_str("result: pass\n");
        } else {
            out.push_str(&format!("result: fail ({} mismatches)\n", self.mismatches));
        }
        out
    }
}

fn parse_error(line: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        line,
        message: message.into(),
    }
}

fn ident(token: &str, line: usize, what: &str) -> Result<String, HarnessError> {
    let ok = !token.is_empty()
        && token
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(token.to_string())
    } else {
        Err(parse_error(line, format!("bad {what} name {token:?}")))
    }
}

fn node_ref<'a>(
    token: &'a str,
    nodes: &[String],
    line: usize,
) -> Result<&'a str, HarnessError> {
    let name = token
        .strip_prefix('@')
        .ok_or_else(|| parse_error(line, format!("expected @node, got {token:?}")))?;
    if nodes.iter().any(|n| n == name) {
        Ok(name)
    } else {
        Err(parse_error(line, format!("unknown node {name:?}")))
    }
}

fn policy_flags(tokens: &[&str], line: usize) -> Result<ComplianceFlags, HarnessError> {
    if tokens.is_empty() {
        return Err(parse_error(line, "policy needs at least one flag"));
    }
    let mut flags = ComplianceFlags::NONE;
    for token in tokens {
        flags = match *token {
            "confidential" => flags.merge(ComplianceFlags::confidential()),
            "integrity" => flags.merge(ComplianceFlags::integral()),
            other => {
                return Err(parse_error(
                    line,
                    format!("unknown flag {other:?} (confidential, integrity)"),
                ))
            }
        };
    }
    Ok(flags)
}

fn expectation(tokens: &[&str], line: usize) -> Result<(Expectation, FlowOutcome), HarnessError> {
    match tokens {
        ["grant"] => Ok((Expectation::Grant, FlowOutcome::Success)),
        ["grant", "fail"] => Ok((Expectation::Grant, FlowOutcome::Failure)),
        ["deny", policy] => Ok((Expectation::Deny(policy.to_string()), FlowOutcome::Success)),
        ["timeout"] => Ok((Expectation::Timeout, FlowOutcome::Success)),
        other => Err(parse_error(
            line,
            format!("bad expectation {other:?} (grant [fail] | deny <policy> | timeout)"),
        )),
    }
}

/// Parses a script. Syntax errors carry the 1-based line number.
pub fn parse(text: &str) -> Result<ScenarioSpec, HarnessError> {
    let mut spec = ScenarioSpec::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens.as_slice() {
            ["node", name] => {
                let name = ident(name, line, "node")?;
                if spec.nodes.contains(&name) {
                    return Err(parse_error(line, format!("duplicate node {name:?}")));
                }
                spec.nodes.push(name);
            }
            ["process", name, node] => spec.items.push(Item::DeclProcess {
                name: ident(name, line, "process")?,
                node: node_ref(node, &spec.nodes, line)?.to_string(),
            }),
            ["file", name, node, path] => {
                if !path.starts_with('/') {
                    return Err(parse_error(line, format!("file path {path:?} not absolute")));
                }
                spec.items.push(Item::DeclFile {
                    name: ident(name, line, "file")?,
                    node: node_ref(node, &spec.nodes, line)?.to_string(),
                    path: path.to_string(),
                });
            }
            ["stream", name, node, "<->", far_name, far_node] => spec.items.push(Item::DeclStream {
                name: ident(name, line, "stream")?,
                node: node_ref(node, &spec.nodes, line)?.to_string(),
                far: StreamFar::Node {
                    name: ident(far_name, line, "stream")?,
                    node: node_ref(far_node, &spec.nodes, line)?.to_string(),
                },
            }),
            ["stream", name, node, "->", "external"] => spec.items.push(Item::DeclStream {
                name: ident(name, line, "stream")?,
                node: node_ref(node, &spec.nodes, line)?.to_string(),
                far: StreamFar::External,
            }),
            ["policy", resource, rest @ ..] => spec.items.push(Item::Policy {
                resource: resource.to_string(),
                flags: policy_flags(rest, line)?,
            }),
            ["flow", source, "->", destination, "expect", rest @ ..] => {
                let (expect, outcome) = expectation(rest, line)?;
                spec.items.push(Item::Flow {
                    source: source.to_string(),
                    destination: destination.to_string(),
                    expect,
                    outcome,
                });
            }
            ["prov", resource, "=", "(empty)"] => spec.items.push(Item::Prov {
                resource: resource.to_string(),
                expected: Vec::new(),
            }),
            ["prov", resource, "=", rest @ ..] if !rest.is_empty() => spec.items.push(Item::Prov {
                resource: resource.to_string(),
                expected: rest.iter().map(|s| s.to_string()).collect(),
            }),
            _ => return Err(parse_error(line, format!("cannot parse {content:?}"))),
        }
    }
    Ok(spec)
}

struct Binding {
    id: ResourceId,
    node: usize,
}

struct Runner<'a> {
    cluster: &'a Cluster,
    clients: Vec<MiddlewareClient>,
    node_names: Vec<String>,
    symbols: BTreeMap<String, Binding>,
    names_by_id: BTreeMap<String, String>,
    next_pid: u32,
}

impl<'a> Runner<'a> {
    fn node_index(&self, name: &str) -> usize {
        // Parse already validated every node reference.
        self.node_names.iter().position(|n| n == name).unwrap()
    }

    fn bind(&mut self, name: &str, id: ResourceId, node: usize) -> Result<(), HarnessError> {
        if self.symbols.contains_key(name) {
            return Err(HarnessError::Infra(format!(
                "resource {name:?} declared twice"
            )));
        }
        self.names_by_id.insert(id.canonical(), name.to_string());
        self.symbols.insert(name.to_string(), Binding { id, node });
        Ok(())
    }

    fn lookup(&self, name: &str) -> Result<&Binding, HarnessError> {
        self.symbols
            .get(name)
            .ok_or_else(|| HarnessError::Infra(format!("unknown resource {name:?}")))
    }

    /// Renders a set of canonical ids as script names where possible,
    /// sorted, for report lines.
    fn render_set(&self, canonical: impl IntoIterator<Item = String>) -> String {
        let mut names: Vec<String> = canonical
            .into_iter()
            .map(|c| self.names_by_id.get(&c).cloned().unwrap_or(c))
            .collect();
        names.sort();
        if names.is_empty() {
            "(empty)".to_string()
        } else {
            names.join(" ")
        }
    }
}

/// Runs a parsed script on a fresh cluster and reports every flow
/// outcome and provenance check. `Ok` means the script executed; check
/// [`ScenarioReport::passed`] for the verdict. `Err` means the run
/// itself could not proceed.
pub fn run(name: &str, spec: &ScenarioSpec) -> Result<ScenarioReport, HarnessError> {
    let node_refs: Vec<&str> = spec.nodes.iter().map(String::as_str).collect();
    let cluster = Cluster::start(&node_refs, Duration::from_secs(5))?;
    let clients = (0..cluster.len()).map(|i| cluster.client(i)).collect();
    let mut runner = Runner {
        cluster: &cluster,
        clients,
        node_names: spec.nodes.clone(),
        symbols: BTreeMap::new(),
        names_by_id: BTreeMap::new(),
        next_pid: FIRST_SYNTHETIC_PID,
    };

    let mut lines = Vec::new();
    let mut mismatches = 0;

    for item in &spec.items {
        match item {
            Item::DeclProcess { name, node } => {
                let idx = runner.node_index(node);
                let id = ResourceId::process(cluster.node_id(idx).clone(), runner.next_pid, 1);
                runner.next_pid += 1;
                runner.clients[idx]
                    .enroll(&id, ComplianceFlags::NONE)
                    .map_err(|e| HarnessError::Infra(format!("enrolling {name}: {e}")))?;
                runner.bind(name, id, idx)?;
            }
            Item::DeclFile { name, node, path } => {
                let idx = runner.node_index(node);
                let id = ResourceId::file(cluster.node_id(idx).clone(), path.clone())
                    .map_err(|e| HarnessError::Infra(format!("file {name}: {e}")))?;
                runner.clients[idx]
                    .enroll(&id, ComplianceFlags::NONE)
                    .map_err(|e| HarnessError::Infra(format!("enrolling {name}: {e}")))?;
                runner.bind(name, id, idx)?;
            }
            Item::DeclStream { name, node, far } => {
                let near_idx = runner.node_index(node);
                match far {
                    StreamFar::External => {
                        let id = runner.cluster.external_stream(near_idx)?;
                        runner.bind(name, id, near_idx)?;
                    }
                    StreamFar::Node {
                        name: far_name,
                        node: far_node,
                    } => {
                        let far_idx = runner.node_index(far_node);
                        let pair = runner.cluster.open_stream(near_idx, far_idx)?;
                        runner.bind(name, pair.near, near_idx)?;
                        runner.bind(far_name, pair.far, far_idx)?;
                    }
                }
            }
            Item::Policy { resource, flags } => {
                let binding = runner.lookup(resource)?;
                runner.clients[binding.node]
                    .set_policy(&binding.id, *flags)
                    .map_err(|e| HarnessError::Infra(format!("policy on {resource}: {e}")))?;
                lines.push(format!("policy {resource}: {flags}"));
            }
            Item::Flow {
                source,
                destination,
                expect,
                outcome,
            } => {
                let src = runner.lookup(source)?;
                let dst = runner.lookup(destination)?;
                // The daemon that mediates a flow is the one next to the
                // process end.
                let idx = if src.id.is_process() { src.node } else { dst.node };
                let client = &runner.clients[idx];
                let actual = match client.request_grant(&src.id, &dst.id) {
                    Ok(GrantMsg::Granted { grant_id }) => {
                        client.report(grant_id, *outcome).map_err(|e| {
                            HarnessError::Infra(format!(
                                "reporting {source} -> {destination}: {e}"
                            ))
                        })?;
                        Expectation::Grant
                    }
                    Ok(GrantMsg::Denied { policy }) => Expectation::Deny(policy),
                    Ok(GrantMsg::TimedOut) => Expectation::Timeout,
                    Err(e) => {
                        return Err(HarnessError::Infra(format!(
                            "flow {source} -> {destination}: {e}"
                        )))
                    }
                };
                if actual == *expect {
                    lines.push(format!("flow {source} -> {destination}: {actual}"));
                } else {
                    mismatches += 1;
                    lines.push(format!(
                        "flow {source} -> {destination}: MISMATCH expected {expect}, got {actual}"
                    ));
                }
            }
            Item::Prov { resource, expected } => {
                let binding = runner.lookup(resource)?;
                let entries = runner.clients[binding.node]
                    .provenance(&binding.id)
                    .map_err(|e| HarnessError::Infra(format!("provenance of {resource}: {e}")))?;
                let actual: Vec<String> = entries.into_iter().map(|e| e.id).collect();
                let mut expected_ids: Vec<String> = expected
                    .iter()
                    .map(|n| runner.lookup(n).map(|b| b.id.canonical()))
                    .collect::<Result<_, _>>()?;
                let mut actual_sorted = actual.clone();
                actual_sorted.sort();
                expected_ids.sort();
                if actual_sorted == expected_ids {
                    lines.push(format!("prov {resource}: {}", runner.render_set(actual)));
                } else {
                    mismatches += 1;
                    lines.push(format!(
                        "prov {resource}: MISMATCH expected {}, got {}",
                        runner.render_set(expected_ids),
                        runner.render_set(actual)
                    ));
                }
            }
        }
    }

    Ok(ScenarioReport {
        name: name.to_string(),
        lines,
        mismatches,
    })
}

/// Parses and runs a script file. The report is named after the file stem.
pub fn run_file(path: &Path) -> Result<ScenarioReport, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Infra(format!("reading {}: {e}", path.display())))?;
    let spec = parse(&text)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".to_string());
    run(&name, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_directive() {
        let spec = parse(
            "# demo\n\
             node alpha\n\
             node beta\n\
             process p @alpha\n\
             file f @alpha /data/f.txt\n\
             stream s @alpha <-> t @beta\n\
             stream x @alpha -> external\n\
             policy f confidential integrity\n\
             flow f -> p expect grant\n\
             flow p -> s expect deny local_confidentiality\n\
             flow f -> p expect grant fail\n\
             flow p -> f expect timeout\n\
             prov p = f\n\
             prov x = (empty)\n",
        )
        .unwrap();
        assert_eq!(spec.nodes, vec!["alpha", "beta"]);
        assert_eq!(spec.items.len(), 11);
        assert!(matches!(
            &spec.items[4],
            Item::Policy { flags, .. } if flags.confidentiality && flags.integrity
        ));
        assert!(matches!(
            &spec.items[7],
            Item::Flow { outcome: FlowOutcome::Failure, .. }
        ));
        assert!(matches!(
            &spec.items[8],
            Item::Flow { expect: Expectation::Timeout, .. }
        ));
    }

    #[test]
    fn reports_line_numbers_on_errors() {
        let err = parse("node alpha\nflow a => b expect grant\n").unwrap_err();
        match err {
            HarnessError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn rejects_references_to_undeclared_nodes() {
        let err = parse("process p @nowhere\n").unwrap_err();
        assert!(matches!(err, HarnessError::Parse { line: 1, .. }));
    }

    #[test]
    fn rejects_relative_file_paths() {
        let err = parse("node n\nfile f @n data.txt\n").unwrap_err();
        assert!(matches!(err, HarnessError::Parse { line: 2, .. }));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let spec = parse("\n# nothing\n   # indented comment\n").unwrap();
        assert!(spec.nodes.is_empty());
        assert!(spec.items.is_empty());
    }
}
