//! Topology runner: one config file declares the whole tree (balancers,
//! leaves, workers), the function set, and the store roots; running it
//! yields a live tree rooted at a single callable node.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

use crate::balancer::{BalancerNode, ChildKind, ChildRef, Strategy, DEFAULT_SNAPSHOT_TTL_MS};
use crate::protocol::transport::{serve_node, NodeHandle, ServerHandle};
use crate::protocol::types::FunctionConfig;
use crate::registry::{ConfigStore, ImageStore};
use crate::util::fnv1a;
use crate::worker::{EmulatedRuntime, ProcessRuntime, WorkerNode, WorkerOptions};

use super::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKindDecl {
    Balancer,
    Leaf,
    Worker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeDecl {
    Process,
    Emulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StrategyDecl {
    Random { seed: Option<u64> },
    RoundRobin,
    LeastInFlight,
    WarmFirst { seed: Option<u64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDecl {
    pub id: String,
    pub kind: NodeKindDecl,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyDecl>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime: Option<RuntimeDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoresDecl {
    pub image_root: PathBuf,
    pub config_root: PathBuf,
}

/// A whole experiment in one file: nodes, functions, stores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub nodes: Vec<NodeDecl>,
    pub functions: Vec<FunctionConfig>,
    pub stores: StoresDecl,
}

impl TopologyConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let bytes = std::fs::read(path)?;
        let cfg: TopologyConfig =
            serde_json::from_slice(&bytes).map_err(|e| BenchError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Id of the unique root (the node no other node references).
    pub fn root_id(&self) -> Result<&str, BenchError> {
        let referenced: HashSet<&str> =
            self.nodes.iter().flat_map(|n| n.children.iter().map(String::as_str)).collect();
        let mut roots =
            self.nodes.iter().map(|n| n.id.as_str()).filter(|id| !referenced.contains(id));
        let root = roots
            .next()
            .ok_or_else(|| BenchError::ConfigInvalid("cycle: no root node".into()))?;
        if let Some(extra) = roots.next() {
            return Err(BenchError::ConfigInvalid(format!(
                "multiple roots: {root} and {extra}"
            )));
        }
        Ok(root)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let invalid = |msg: String| Err(BenchError::ConfigInvalid(msg));
        if self.nodes.is_empty() {
            return invalid("no nodes declared".into());
        }

        let mut by_id: HashMap<&str, &NodeDecl> = HashMap::new();
        for node in &self.nodes {
            if by_id.insert(node.id.as_str(), node).is_some() {
                return invalid(format!("duplicate node id {}", node.id));
            }
        }

        let mut parent_of: HashMap<&str, &str> = HashMap::new();
        for node in &self.nodes {
            for child in &node.children {
                let Some(child_decl) = by_id.get(child.as_str()) else {
                    return invalid(format!("{}: unknown child {child}", node.id));
                };
                if child == &node.id {
                    return invalid(format!("cycle: {} references itself", node.id));
                }
                if let Some(other) = parent_of.insert(child.as_str(), node.id.as_str()) {
                    return invalid(format!(
                        "{child} has two parents: {other} and {}",
                        node.id
                    ));
                }
                match (node.kind, child_decl.kind) {
                    (NodeKindDecl::Leaf, NodeKindDecl::Worker) => {}
                    (NodeKindDecl::Leaf, _) => {
                        return invalid(format!(
                            "leaf {} may only have worker children, {child} is not one",
                            node.id
                        ))
                    }
                    (NodeKindDecl::Balancer, NodeKindDecl::Worker) => {
                        return invalid(format!(
                            "balancer {} routes to {child}, a worker; use a leaf for that tier",
                            node.id
                        ))
                    }
                    (NodeKindDecl::Balancer, _) => {}
                    (NodeKindDecl::Worker, _) => {
                        return invalid(format!("worker {} cannot have children", node.id))
                    }
                }
            }
            match node.kind {
                NodeKindDecl::Balancer | NodeKindDecl::Leaf => {
                    if node.children.is_empty() {
                        return invalid(format!("{}: needs at least one child", node.id));
                    }
                    // snapshots only exist at leaves, so interior nodes
                    // must route statelessly
                    if node.kind == NodeKindDecl::Balancer {
                        if let Some(
                            StrategyDecl::LeastInFlight | StrategyDecl::WarmFirst { .. },
                        ) = node.strategy
                        {
                            return invalid(format!(
                                "balancer {}: stateful strategies are only valid on leaves",
                                node.id
                            ));
                        }
                    }
                }
                NodeKindDecl::Worker => {
                    if node.runtime == Some(RuntimeDecl::Emulated) && node.model.is_none() {
                        return invalid(format!("worker {}: emulated runtime needs a model", node.id));
                    }
                }
            }
        }

        let root = self.root_id()?;

        // walk the tree; revisits mean a cycle, unvisited nodes are
        // disconnected (also only reachable through a cycle)
        let mut visited: HashSet<&str> = HashSet::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if !visited.insert(id) {
                return invalid(format!("cycle through {id}"));
            }
            for child in &by_id[id].children {
                stack.push(child.as_str());
            }
        }
        if visited.len() != self.nodes.len() {
            let missing: Vec<&str> = self
                .nodes
                .iter()
                .map(|n| n.id.as_str())
                .filter(|id| !visited.contains(id))
                .collect();
            return invalid(format!("nodes unreachable from root {root}: {missing:?}"));
        }

        for cfg in &self.functions {
            cfg.validate()
                .map_err(|e| BenchError::ConfigInvalid(format!("function {}: {e}", cfg.function)))?;
        }
        Ok(())
    }
}

fn strategy_for(decl: &Option<StrategyDecl>, node_id: &str) -> Strategy {
    match decl {
        None | Some(StrategyDecl::RoundRobin) => Strategy::RoundRobin,
        Some(StrategyDecl::Random { seed }) => {
            Strategy::Random { seed: seed.unwrap_or_else(|| fnv1a(node_id)) }
        }
        Some(StrategyDecl::LeastInFlight) => Strategy::LeastInFlight,
        Some(StrategyDecl::WarmFirst { seed }) => {
            Strategy::WarmFirst { fallback_seed: seed.unwrap_or_else(|| fnv1a(node_id)) }
        }
    }
}

/// A live tree. Dropping it aborts servers and refreshers; call
/// [`RunningTopology::shutdown`] to drain workers first.
pub struct RunningTopology {
    pub root_id: String,
    pub root: Arc<dyn NodeHandle>,
    /// Address of the root's TCP server, when one was requested.
    pub root_addr: Option<SocketAddr>,
    pub workers: Vec<(String, Arc<WorkerNode>)>,
    balancers: Vec<Arc<BalancerNode>>,
    servers: Vec<(String, ServerHandle)>,
    refreshers: Vec<JoinHandle<()>>,
}

impl RunningTopology {
    pub fn worker(&self, id: &str) -> Option<&Arc<WorkerNode>> {
        self.workers.iter().find(|(wid, _)| wid == id).map(|(_, w)| w)
    }

    pub fn server_addr(&self, id: &str) -> Option<SocketAddr> {
        self.servers.iter().find(|(sid, _)| sid == id).map(|(_, s)| s.local_addr())
    }

    /// Drain every worker, then stop servers and refreshers.
    pub async fn shutdown(self) {
        for r in &self.refreshers {
            r.abort();
        }
        for (_, worker) in &self.workers {
            worker.shutdown().await;
        }
        drop(self.servers);
        drop(self.balancers);
    }
}

/// Launch every declared node in-process, wire children by id, seed the
/// config store, and expose listeners where requested.
pub async fn run_topology(cfg: &TopologyConfig) -> Result<RunningTopology, BenchError> {
    cfg.validate()?;
    let root_id = cfg.root_id()?.to_string();

    let image_store = ImageStore::open(&cfg.stores.image_root)
        .map_err(|e| BenchError::ConfigInvalid(format!("image store: {e}")))?;
    let config_store = ConfigStore::open(&cfg.stores.config_root)
        .map_err(|e| BenchError::ConfigInvalid(format!("config store: {e}")))?;
    for function in &cfg.functions {
        config_store
            .put(function)
            .map_err(|e| BenchError::ConfigInvalid(format!("seed config: {e}")))?;
    }

    let by_id: HashMap<&str, &NodeDecl> = cfg.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    let mut built: HashMap<String, Arc<dyn NodeHandle>> = HashMap::new();
    let mut workers: Vec<(String, Arc<WorkerNode>)> = Vec::new();
    let mut balancers: Vec<Arc<BalancerNode>> = Vec::new();
    let mut refreshers: Vec<JoinHandle<()>> = Vec::new();

    // children-first build order over the tree
    let mut order: Vec<&str> = Vec::new();
    let mut stack: Vec<(&str, bool)> = vec![(root_id.as_str(), false)];
    while let Some((id, expanded)) = stack.pop() {
        if expanded {
            order.push(id);
            continue;
        }
        stack.push((id, true));
        for child in &by_id[id].children {
            stack.push((child.as_str(), false));
        }
    }

    for id in order {
        let decl = by_id[id];
        let handle: Arc<dyn NodeHandle> = match decl.kind {
            NodeKindDecl::Worker => {
                let runtime: Arc<dyn crate::worker::runtime::Runtime> =
                    match decl.runtime.unwrap_or(RuntimeDecl::Process) {
                        RuntimeDecl::Process => {
                            let scratch = std::env::temp_dir()
                                .join(format!("faastree-{}-{id}", std::process::id()));
                            Arc::new(ProcessRuntime::new(scratch).map_err(|e| {
                                BenchError::ConfigInvalid(format!("worker {id}: {e}"))
                            })?)
                        }
                        RuntimeDecl::Emulated => {
                            let path = decl.model.as_ref().expect("validated");
                            let model = crate::emulator::WorkerModel::load(path).map_err(|e| {
                                BenchError::ConfigInvalid(format!("worker {id}: model: {e}"))
                            })?;
                            Arc::new(EmulatedRuntime::new(Arc::new(model), fnv1a(id)))
                        }
                    };
                let worker = WorkerNode::new(
                    WorkerOptions::new(id),
                    runtime,
                    config_store.clone(),
                    image_store.clone(),
                );
                workers.push((id.to_string(), Arc::clone(&worker)));
                worker
            }
            NodeKindDecl::Balancer | NodeKindDecl::Leaf => {
                let children: Vec<ChildRef> = decl
                    .children
                    .iter()
                    .map(|child_id| ChildRef {
                        child_id: child_id.clone(),
                        kind: if by_id[child_id.as_str()].kind == NodeKindDecl::Worker {
                            ChildKind::Worker
                        } else {
                            ChildKind::Balancer
                        },
                        handle: Arc::clone(&built[child_id]),
                    })
                    .collect();
                let store = if decl.kind == NodeKindDecl::Leaf {
                    Some(config_store.clone())
                } else {
                    None
                };
                let node = BalancerNode::new(
                    id,
                    strategy_for(&decl.strategy, id),
                    children,
                    DEFAULT_SNAPSHOT_TTL_MS,
                    store,
                );
                if decl.kind == NodeKindDecl::Leaf {
                    refreshers.push(node.spawn_refresher());
                }
                balancers.push(Arc::clone(&node));
                node
            }
        };
        built.insert(id.to_string(), handle);
    }

    let mut servers = Vec::new();
    let mut root_addr = None;
    for decl in &cfg.nodes {
        if let Some(listen) = &decl.listen {
            let server = serve_node(listen, Arc::clone(&built[&decl.id]))
                .await
                .map_err(|e| BenchError::ConfigInvalid(format!("{}: listen {listen}: {e}", decl.id)))?;
            if decl.id == root_id {
                root_addr = Some(server.local_addr());
            }
            servers.push((decl.id.clone(), server));
        }
    }

    Ok(RunningTopology {
        root: Arc::clone(&built[&root_id]),
        root_id,
        root_addr,
        workers,
        balancers,
        servers,
        refreshers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::types::{ConcurrencyMode, FunctionId};

    fn node(id: &str, kind: NodeKindDecl, children: &[&str]) -> NodeDecl {
        NodeDecl {
            id: id.into(),
            kind,
            strategy: None,
            children: children.iter().map(|s| s.to_string()).collect(),
            listen: None,
            runtime: if kind == NodeKindDecl::Worker { Some(RuntimeDecl::Process) } else { None },
            model: None,
        }
    }

    fn config(nodes: Vec<NodeDecl>) -> TopologyConfig {
        TopologyConfig {
            nodes,
            functions: vec![FunctionConfig {
                function: FunctionId::new("echo").unwrap(),
                image_digest: "a".repeat(64),
                memory_limit_mb: 128,
                cpu_millis: 1000,
                concurrency: ConcurrencyMode::Single,
                idle_timeout_ms: 1000,
                exec_deadline_ms: 30_000,
            }],
            stores: StoresDecl { image_root: "/tmp/x".into(), config_root: "/tmp/x".into() },
        }
    }

    #[test]
    fn self_reference_is_a_cycle() {
        let cfg = config(vec![node("a", NodeKindDecl::Balancer, &["a"])]);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let cfg = config(vec![
            node("a", NodeKindDecl::Leaf, &["w"]),
            node("w", NodeKindDecl::Worker, &[]),
            node("w", NodeKindDecl::Worker, &[]),
        ]);
        assert!(cfg.validate().unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn leaf_with_balancer_child_rejected() {
        let cfg = config(vec![
            node("root", NodeKindDecl::Leaf, &["mid"]),
            node("mid", NodeKindDecl::Leaf, &["w"]),
            node("w", NodeKindDecl::Worker, &[]),
        ]);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("leaf root may only have worker children"), "{err}");
    }

    #[test]
    fn balancer_with_worker_child_rejected() {
        let cfg = config(vec![
            node("root", NodeKindDecl::Balancer, &["w"]),
            node("w", NodeKindDecl::Worker, &[]),
        ]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn two_parent_child_rejected() {
        let cfg = config(vec![
            node("root", NodeKindDecl::Balancer, &["l1", "l2"]),
            node("l1", NodeKindDecl::Leaf, &["w"]),
            node("l2", NodeKindDecl::Leaf, &["w"]),
            node("w", NodeKindDecl::Worker, &[]),
        ]);
        assert!(cfg.validate().unwrap_err().to_string().contains("two parents"));
    }

    #[test]
    fn mutual_cycle_detected() {
        // a <-> b plus a proper root referencing a: b has two parents
        // or no root exists; either way invalid
        let cfg = config(vec![
            node("a", NodeKindDecl::Balancer, &["b"]),
            node("b", NodeKindDecl::Balancer, &["a"]),
        ]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn interior_stateful_strategy_rejected() {
        let mut n = node("root", NodeKindDecl::Balancer, &["leaf"]);
        n.strategy = Some(StrategyDecl::LeastInFlight);
        let cfg = config(vec![
            n,
            node("leaf", NodeKindDecl::Leaf, &["w"]),
            node("w", NodeKindDecl::Worker, &[]),
        ]);
        assert!(cfg.validate().unwrap_err().to_string().contains("stateful"));
    }

    #[test]
    fn valid_tree_passes() {
        let cfg = config(vec![
            node("root", NodeKindDecl::Balancer, &["l1", "l2"]),
            node("l1", NodeKindDecl::Leaf, &["w1"]),
            node("l2", NodeKindDecl::Leaf, &["w2"]),
            node("w1", NodeKindDecl::Worker, &[]),
            node("w2", NodeKindDecl::Worker, &[]),
        ]);
        cfg.validate().unwrap();
        assert_eq!(cfg.root_id().unwrap(), "root");
    }
}
