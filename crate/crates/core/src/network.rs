//! Channel trajectories for every link a round can use.
//!
//! Links are stored once per node pair in downstream order (gNB before RU
//! before UE); the reverse direction is the transpose.

use std::collections::BTreeMap;

use crate::channel::{link_stream, CMatrix, ChannelOptions, LinkTrajectory, SUBCARRIER_GROUPS};
use crate::error::{Error, Result};
use crate::precoding::CompositeChannel;
use crate::scenario::{NodeId, NodeKind, NodeSpec, Scenario};

fn rank(kind: NodeKind) -> u8 {
    match kind {
        NodeKind::Gnb => 0,
        NodeKind::Ru => 1,
        NodeKind::Ue => 2,
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub scenario: Scenario,
    links: BTreeMap<(NodeId, NodeId), LinkTrajectory>,
}

impl Network {
    /// Builds gNB-RU, gNB-UE and RU-UE links. Fading streams depend only on
    /// the scenario seed and the node ids.
    pub fn new(scenario: &Scenario, options: &ChannelOptions) -> Self {
        let mut links = BTreeMap::new();
        let infra: Vec<&NodeSpec> = scenario.nodes.iter().filter(|n| n.kind != NodeKind::Ue).collect();
        for a in &infra {
            for b in &scenario.nodes {
                let wanted = matches!(
                    (a.kind, b.kind),
                    (NodeKind::Gnb, NodeKind::Ru | NodeKind::Ue) | (NodeKind::Ru, NodeKind::Ue)
                );
                if wanted {
                    let stream = link_stream(scenario.seed, a.id, b.id);
                    links.insert((a.id, b.id), LinkTrajectory::new(a, b, &scenario.ofdm, stream, options));
                }
            }
        }
        Self {
            scenario: scenario.clone(),
            links,
        }
    }

    fn key(&self, tx: NodeId, rx: NodeId) -> Result<((NodeId, NodeId), bool)> {
        let kind = |id| {
            self.scenario
                .node(id)
                .map(|n| n.kind)
                .ok_or_else(|| Error::arg(format!("unknown node {id}")))
        };
        let (kt, kr) = (kind(tx)?, kind(rx)?);
        let reversed = (rank(kt), tx) > (rank(kr), rx);
        let key = if reversed { (rx, tx) } else { (tx, rx) };
        if !self.links.contains_key(&key) {
            return Err(Error::arg(format!("no link modelled between {tx} and {rx}")));
        }
        Ok((key, reversed))
    }

    /// Trajectory in its stored (downstream) orientation.
    pub fn trajectory(&self, a: NodeId, b: NodeId) -> Result<&LinkTrajectory> {
        let (key, _) = self.key(a, b)?;
        Ok(&self.links[&key])
    }

    /// `rx x tx` channel of subcarrier group `group` at time `t_s`.
    pub fn channel(&self, tx: NodeId, rx: NodeId, group: usize, t_s: f64) -> Result<CMatrix> {
        let (key, reversed) = self.key(tx, rx)?;
        let h = self.links[&key].matrix_at(group, t_s);
        Ok(if reversed { h.transpose() } else { h })
    }

    /// Per-UE blocks `[H(tx_1 -> ue) .. H(tx_n -> ue)]`.
    pub fn composite(&self, tx_ids: &[NodeId], ue_ids: &[NodeId], group: usize, t_s: f64) -> Result<CompositeChannel> {
        let blocks = self.composite_with(tx_ids, ue_ids, |tx, ue| self.channel(tx, ue, group, t_s))?;
        let antennas = tx_ids
            .iter()
            .map(|id| self.scenario.node(*id).map(|n| n.num_antennas).unwrap_or(0))
            .collect();
        CompositeChannel::new(blocks, antennas)
    }

    /// Per-UE blocks assembled from an arbitrary per-link source.
    pub fn composite_with<F>(&self, tx_ids: &[NodeId], ue_ids: &[NodeId], mut link: F) -> Result<Vec<CMatrix>>
    where
        F: FnMut(NodeId, NodeId) -> Result<CMatrix>,
    {
        ue_ids
            .iter()
            .map(|&ue| {
                let parts = tx_ids.iter().map(|&tx| link(tx, ue)).collect::<Result<Vec<_>>>()?;
                Ok(hstack(&parts))
            })
            .collect()
    }

    pub fn groups(&self) -> usize {
        SUBCARRIER_GROUPS
    }
}

pub fn hstack(parts: &[CMatrix]) -> CMatrix {
    let rows = parts.first().map_or(0, |p| p.nrows());
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.columns_mut(at, p.ncols()).copy_from(p);
        at += p.ncols();
    }
    out
}
