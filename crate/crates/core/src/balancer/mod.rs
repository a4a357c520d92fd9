//! Balancer nodes: interior nodes forward calls down the tree, leaf
//! nodes route to workers and keep their snapshots fresh.

pub mod strategy;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use async_trait::async_trait;
use tokio::task::JoinHandle;
use tracing::debug;

use crate::protocol::transport::{NodeHandle, TransportError};
use crate::protocol::types::{
    CallRequest, CallResponse, ConcurrencyMode, FunctionId, WorkerSnapshot,
};
use crate::registry::ConfigStore;
use crate::util::epoch_ms;

pub use strategy::{route, Strategy, StrategyState};

/// Default freshness window for worker snapshots.
pub const DEFAULT_SNAPSHOT_TTL_MS: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildKind {
    Balancer,
    Worker,
}

/// A child edge in the tree: an id unique within this node plus a
/// handle (in-process or TCP, the node cannot tell).
pub struct ChildRef {
    pub child_id: String,
    pub kind: ChildKind,
    pub handle: Arc<dyn NodeHandle>,
}

#[derive(Debug, Clone)]
pub struct SnapshotEntry {
    pub snapshot: WorkerSnapshot,
    pub fetched_at_ms: u64,
}

/// Immutable routing inputs handed to the strategy: child ids in
/// declaration order, fresh-enough snapshots, and the concurrency modes
/// WarmFirst needs to judge spare capacity.
pub struct RoutingView {
    pub children: Vec<String>,
    pub snapshots: HashMap<String, SnapshotEntry>,
    pub snapshot_ttl_ms: u64,
    pub concurrency_modes: HashMap<FunctionId, ConcurrencyMode>,
}

struct Shared {
    snapshots: HashMap<String, SnapshotEntry>,
    concurrency_modes: HashMap<FunctionId, ConcurrencyMode>,
}

/// One balancer node. Leaf nodes (children of kind Worker) additionally
/// poll worker state every `snapshot_ttl_ms / 2` via
/// [`BalancerNode::spawn_refresher`].
pub struct BalancerNode {
    node_id: String,
    children: Vec<ChildRef>,
    strategy: Strategy,
    state: Mutex<StrategyState>,
    shared: RwLock<Shared>,
    snapshot_ttl_ms: u64,
    config_store: Option<ConfigStore>,
}

impl BalancerNode {
    pub fn new(
        node_id: impl Into<String>,
        strategy: Strategy,
        children: Vec<ChildRef>,
        snapshot_ttl_ms: u64,
        config_store: Option<ConfigStore>,
    ) -> Arc<Self> {
        assert!(!children.is_empty(), "a balancer needs at least one child");
        let state = strategy.new_state();
        Arc::new(Self {
            node_id: node_id.into(),
            children,
            strategy,
            state: Mutex::new(state),
            shared: RwLock::new(Shared {
                snapshots: HashMap::new(),
                concurrency_modes: HashMap::new(),
            }),
            snapshot_ttl_ms,
            config_store,
        })
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn is_leaf(&self) -> bool {
        self.children.iter().all(|c| c.kind == ChildKind::Worker)
    }

    fn routing_view(&self) -> RoutingView {
        let shared = self.shared.read().unwrap();
        RoutingView {
            children: self.children.iter().map(|c| c.child_id.clone()).collect(),
            snapshots: shared.snapshots.clone(),
            snapshot_ttl_ms: self.snapshot_ttl_ms,
            concurrency_modes: shared.concurrency_modes.clone(),
        }
    }

    fn pick(&self, req: &CallRequest, exclude: Option<usize>) -> Option<usize> {
        let mut view = self.routing_view();
        let now = epoch_ms();
        match exclude {
            None => {
                let mut state = self.state.lock().unwrap();
                Some(route(req, &view, &self.strategy, &mut state, now))
            }
            Some(failed) => {
                // retry pick over the remaining children, same strategy
                if self.children.len() < 2 {
                    return None;
                }
                view.children.remove(failed);
                let mut state = self.state.lock().unwrap();
                let picked = route(req, &view, &self.strategy, &mut state, now);
                Some(if picked >= failed { picked + 1 } else { picked })
            }
        }
    }

    /// Pull fresh snapshots from every worker child; unreachable workers
    /// keep their stale entry until the ttl expires it. Also refreshes
    /// the concurrency modes WarmFirst consults.
    pub async fn refresh_snapshots(&self) {
        let fetches = self
            .children
            .iter()
            .filter(|c| c.kind == ChildKind::Worker)
            .map(|c| {
                let id = c.child_id.clone();
                let handle = Arc::clone(&c.handle);
                async move {
                    let result = tokio::time::timeout(Duration::from_millis(1000), handle.state()).await;
                    (id, result)
                }
            })
            .collect::<Vec<_>>();
        let results = futures_join_all(fetches).await;

        let modes: Option<HashMap<FunctionId, ConcurrencyMode>> =
            self.config_store.as_ref().map(|store| {
                store
                    .list()
                    .unwrap_or_default()
                    .into_iter()
                    .map(|cfg| (cfg.function.clone(), cfg.concurrency))
                    .collect()
            });

        let mut shared = self.shared.write().unwrap();
        for (child_id, result) in results {
            match result {
                Ok(Ok(snapshot)) => {
                    shared
                        .snapshots
                        .insert(child_id, SnapshotEntry { snapshot, fetched_at_ms: epoch_ms() });
                }
                Ok(Err(e)) => debug!(node = %self.node_id, child = %child_id, "state fetch failed: {e}"),
                Err(_) => debug!(node = %self.node_id, child = %child_id, "state fetch timed out"),
            }
        }
        if let Some(modes) = modes {
            shared.concurrency_modes = modes;
        }
    }

    /// Background refresh loop at half the snapshot ttl. Intended for
    /// leaves; the handle aborts when dropped.
    pub fn spawn_refresher(self: &Arc<Self>) -> JoinHandle<()> {
        let weak = Arc::downgrade(self);
        let period = Duration::from_millis((self.snapshot_ttl_ms / 2).max(10));
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(period).await;
                let Some(node) = weak.upgrade() else { return };
                node.refresh_snapshots().await;
            }
        })
    }

    /// Route and forward with exactly one retry on transport failure,
    /// excluding the failed child.
    pub async fn forward(&self, req: CallRequest) -> Result<CallResponse, TransportError> {
        let first = self.pick(&req, None).expect("children non-empty");
        let child = &self.children[first];
        match child.handle.call(req.clone()).await {
            Ok(resp) => Ok(resp),
            Err(e) if e.is_retryable() => {
                debug!(node = %self.node_id, child = %child.child_id, "forward failed, retrying once: {e}");
                match self.pick(&req, Some(first)) {
                    Some(second) => self.children[second].handle.call(req).await,
                    None => Err(e),
                }
            }
            Err(e) => Err(e),
        }
    }
}

// tokio has no join_all; tiny local helper keeps the dependency set lean
async fn futures_join_all<F, T>(futs: Vec<F>) -> Vec<T>
where
    F: std::future::Future<Output = T> + Send + 'static,
    T: Send + 'static,
{
    let mut handles = Vec::with_capacity(futs.len());
    for f in futs {
        handles.push(tokio::spawn(f));
    }
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        if let Ok(v) = h.await {
            out.push(v);
        }
    }
    out
}

#[async_trait]
impl NodeHandle for BalancerNode {
    async fn call(&self, req: CallRequest) -> Result<CallResponse, TransportError> {
        self.forward(req).await
    }
}
