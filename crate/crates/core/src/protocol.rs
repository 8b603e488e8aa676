//! Two-phase cooperative rounds: coherent downlink through a transmit
//! virtual array and non-coherent uplink through a receive virtual array.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_gaussian, group_center_subcarrier, CMatrix, ChannelOptions, C64};
use crate::detect::{
    alamouti_effective_channel, alamouti_effective_observation, alamouti_encode, alamouti_receive, fuse_decisions,
    sic_detect, sic_post_sinrs, Constellation, DetectionReport, FusionStrategy, Modulation,
};
use crate::error::{Error, Result};
use crate::link_adaptation::{capacity_goodput, effective_snr_linear, max_throughput, McsTable, DEFAULT_OVERHEAD};
use crate::network::Network;
use crate::precoding::{baseline_capacity_bpshz, per_ue_rates, stream_sinrs, zf_precoder};
use crate::reservoir::{predict_next_batch, ReadoutSharing, ReservoirConfig};
use crate::scenario::{dbm_to_mw, NodeId, NodeKind, Scenario};
use crate::seeding;
use crate::sync::{evolve_phase_noise, rotate_columns, uplink_cfo_ici, SyncState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsiSource {
    Perfect,
    #[default]
    Stale,
    Predicted,
}

impl std::fmt::Display for CsiSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CsiSource::Perfect => "perfect",
            CsiSource::Stale => "stale",
            CsiSource::Predicted => "predicted",
        })
    }
}

impl std::str::FromStr for CsiSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "perfect" => Ok(CsiSource::Perfect),
            "stale" => Ok(CsiSource::Stale),
            "predicted" => Ok(CsiSource::Predicted),
            other => Err(Error::arg(format!("unknown CSI source {other:?}"))),
        }
    }
}

/// How the two hops share time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSplit {
    /// Each phase gets exactly the time its share of the payload needs.
    #[default]
    Optimal,
    FixedHalf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorOptions {
    pub reservoir: ReservoirConfig,
    /// CSI reports fed to the predictor before each prediction.
    pub history: usize,
    pub sharing: ReadoutSharing,
}

impl Default for PredictorOptions {
    fn default() -> Self {
        Self {
            reservoir: ReservoirConfig {
                size: 32,
                ..Default::default()
            },
            history: 150,
            sharing: ReadoutSharing::PerSequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownlinkOptions {
    /// Delay between CSI measurement and precoded transmission; also the
    /// CSI report period seen by the predictor.
    pub csi_age_s: f64,
    pub time_split: TimeSplit,
    pub predictor: PredictorOptions,
    #[serde(skip)]
    pub channel: ChannelOptions,
    #[serde(skip)]
    pub mcs: McsTable,
    pub overhead: f64,
}

impl Default for DownlinkOptions {
    fn default() -> Self {
        Self {
            csi_age_s: 1e-3,
            time_split: TimeSplit::Optimal,
            predictor: PredictorOptions::default(),
            channel: ChannelOptions::default(),
            mcs: McsTable::default(),
            overhead: DEFAULT_OVERHEAD,
        }
    }
}

/// Realized phase-2 performance, averaged over subcarrier groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Outcome {
    pub per_ue_rate_bpshz: Vec<f64>,
    /// Linear SINR indexed `[ue][stream][group]`.
    pub stream_sinr: Vec<Vec<Vec<f64>>>,
    pub zf_infeasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownlinkRound {
    /// `None` when no RU takes part (direct transmission).
    pub phase1_rate_bpshz: Option<f64>,
    pub phase2_rates_bpshz: Vec<f64>,
    /// Fraction of time spent broadcasting to the RUs.
    pub time_split: f64,
    pub end_to_end_rates_bpshz: Vec<f64>,
    pub end_to_end_mbps: Vec<f64>,
    pub zf_infeasible: bool,
    pub active_rus: Vec<NodeId>,
}

impl DownlinkRound {
    pub fn sum_rate_bpshz(&self) -> f64 {
        self.end_to_end_rates_bpshz.iter().sum()
    }

    pub fn sum_mbps(&self) -> f64 {
        self.end_to_end_mbps.iter().sum()
    }

    pub fn phase2_sum_bpshz(&self) -> f64 {
        self.phase2_rates_bpshz.iter().sum()
    }
}

/// Per-UE rate of a two-hop cascade where the first hop carries the payload
/// of all `ues` UEs; returns (rates, phase-1 time share).
pub fn cascade(r1: f64, r2: &[f64], split: TimeSplit) -> (Vec<f64>, f64) {
    let u = r2.len() as f64;
    match split {
        TimeSplit::Optimal => {
            let rates = r2
                .iter()
                .map(|&r| {
                    let d = r1 + u * r;
                    if d > 0.0 {
                        r1 * r / d
                    } else {
                        0.0
                    }
                })
                .collect();
            let mean = r2.iter().sum::<f64>() / u.max(1.0);
            let d = r1 + u * mean;
            (rates, if d > 0.0 { u * mean / d } else { 0.0 })
        }
        TimeSplit::FixedHalf => (r2.iter().map(|&r| 0.5 * (r1 / u).min(r)).collect(), 0.5),
    }
}

fn node_antennas(net: &Network, id: NodeId) -> Result<usize> {
    net.scenario
        .node(id)
        .map(|n| n.num_antennas)
        .ok_or_else(|| Error::arg(format!("unknown node {id}")))
}

/// Batched RC prediction of every link entry at `t0` from reports taken
/// every `csi_age_s` before it. Returns one composite block set per group.
fn predicted_blocks(
    net: &Network,
    tx: &[NodeId],
    ues: &[NodeId],
    t0: f64,
    opts: &DownlinkOptions,
) -> Result<Vec<Vec<CMatrix>>> {
    let len = opts.predictor.history.max(2);
    let times: Vec<f64> = (0..len).map(|j| t0 - (len - j) as f64 * opts.csi_age_s).collect();
    let groups = net.groups();
    // Shapes per (ue, tx) so predictions can be folded back.
    let mut shapes = Vec::new();
    let mut seqs: Vec<Vec<C64>> = Vec::new();
    for g in 0..groups {
        for &ue in ues {
            for &t in tx {
                let hist: Vec<CMatrix> = times.iter().map(|&s| net.channel(t, ue, g, s)).collect::<Result<_>>()?;
                let (r, c) = hist[0].shape();
                if g == 0 {
                    shapes.push((r, c));
                }
                for i in 0..r {
                    for j in 0..c {
                        seqs.push(hist.iter().map(|h| h[(i, j)]).collect());
                    }
                }
            }
        }
    }
    let seed = seeding::derive(&[net.scenario.seed, seeding::tag::RESERVOIR]);
    let pred = predict_next_batch(&opts.predictor.reservoir, opts.predictor.sharing, seed, &seqs)?;
    let mut it = pred.into_iter();
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        let mut blocks = Vec::with_capacity(ues.len());
        let mut k = 0;
        for _ in ues {
            let mut parts = Vec::with_capacity(tx.len());
            for _ in tx {
                let (r, c) = shapes[k];
                k += 1;
                let mut m = CMatrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        m[(i, j)] = it.next().expect("one prediction per entry");
                    }
                }
                parts.push(m);
            }
            blocks.push(crate::network::hstack(&parts));
        }
        out.push(blocks);
    }
    Ok(out)
}

/// ZF from the virtual array `tx` to `ues` at time `t0`, precoded on the
/// selected CSI and applied to the true, impaired channel. Residual
/// interference counts as noise.
pub fn phase2(
    net: &Network,
    tx: &[NodeId],
    ues: &[NodeId],
    sync: &SyncState,
    csi: CsiSource,
    t0: f64,
    opts: &DownlinkOptions,
) -> Result<Phase2Outcome> {
    let scenario = &net.scenario;
    let budgets: Vec<f64> = tx
        .iter()
        .map(|id| {
            scenario
                .node(*id)
                .map(|n| n.tx_power_dbm)
                .ok_or_else(|| Error::arg(format!("unknown node {id}")))
        })
        .collect::<Result<_>>()?;
    let antennas: Vec<usize> = tx.iter().map(|id| node_antennas(net, *id)).collect::<Result<_>>()?;
    let noise_dbm = scenario.noise_power_dbm();
    let elapsed = match csi {
        CsiSource::Perfect => 0.0,
        _ => opts.csi_age_s,
    };
    let predicted = match csi {
        CsiSource::Predicted => Some(predicted_blocks(net, tx, ues, t0, opts)?),
        _ => None,
    };
    let groups = net.groups();
    let ue_streams: Vec<usize> = ues.iter().map(|id| node_antennas(net, *id)).collect::<Result<_>>()?;
    let mut rates = vec![0.0; ues.len()];
    let mut stream_sinr: Vec<Vec<Vec<f64>>> = ue_streams
        .iter()
        .map(|&n| vec![Vec::with_capacity(groups); n])
        .collect();
    let mut infeasible = false;
    for g in 0..groups {
        let estimate = match (&predicted, csi) {
            (Some(p), _) => crate::precoding::CompositeChannel::new(p[g].clone(), antennas.clone())?,
            (None, CsiSource::Perfect) => net.composite(tx, ues, g, t0)?,
            (None, _) => net.composite(tx, ues, g, t0 - opts.csi_age_s)?,
        };
        let truth = net.composite(tx, ues, g, t0)?;
        let mut h_true = truth.stacked();
        let k = group_center_subcarrier(&scenario.ofdm, g);
        for (id, cols) in tx.iter().zip(truth.node_columns()) {
            rotate_columns(
                &mut h_true,
                cols,
                sync.rotation_rad(*id, elapsed, k, scenario.ofdm.scs_hz),
            );
        }
        let (sinrs, streams_per_ue) = match zf_precoder(&estimate, &budgets, noise_dbm) {
            Ok(p) => (
                stream_sinrs(&h_true, &p.precoder, p.stream_power_mw, p.noise_power_mw),
                p.streams_per_ue,
            ),
            Err(Error::ZfInfeasible { .. }) => {
                infeasible = true;
                (vec![0.0; truth.num_streams()], truth.streams_per_ue())
            }
            Err(e) => return Err(e),
        };
        let (_, ue_rates) = per_ue_rates(&sinrs, &streams_per_ue);
        let mut at = 0;
        for (u, &n) in streams_per_ue.iter().enumerate() {
            rates[u] += ue_rates[u] / groups as f64;
            for s in 0..n {
                stream_sinr[u][s].push(sinrs[at + s]);
            }
            at += n;
        }
    }
    Ok(Phase2Outcome {
        per_ue_rate_bpshz: rates,
        stream_sinr,
        zf_infeasible: infeasible,
    })
}

/// Group-averaged open-loop capacity of the direct link.
pub fn direct_capacity(net: &Network, tx: NodeId, rx: NodeId, t_s: f64) -> Result<f64> {
    let power = net
        .scenario
        .node(tx)
        .map(|n| n.tx_power_dbm)
        .unwrap_or(f64::NEG_INFINITY);
    let noise = net.scenario.noise_power_dbm();
    let mut sum = 0.0;
    for g in 0..net.groups() {
        sum += baseline_capacity_bpshz(&net.channel(tx, rx, g, t_s)?, power, noise);
    }
    Ok(sum / net.groups() as f64)
}

fn link_streams(net: &Network, a: NodeId, b: NodeId) -> Result<usize> {
    Ok(node_antennas(net, a)?.min(node_antennas(net, b)?))
}

struct SlotResult {
    phase1: Option<f64>,
    phase1_mbps: f64,
    phase2: Vec<f64>,
    phase2_mbps: Vec<f64>,
    infeasible: bool,
}

fn downlink_slot(
    net: &Network,
    sync: &SyncState,
    csi: CsiSource,
    t0: f64,
    opts: &DownlinkOptions,
) -> Result<SlotResult> {
    let s = &net.scenario;
    let gnb = s.gnb().ok_or_else(|| Error::arg("scenario has no gNB"))?.id;
    let rus: Vec<NodeId> = s.rus().map(|n| n.id).collect();
    let ues: Vec<NodeId> = s.ues().map(|n| n.id).collect();
    let bw = s.ofdm.bandwidth_hz();
    let table = &opts.mcs.entries;
    let u = ues.len() as f64;
    if rus.is_empty() {
        let mut phase2 = Vec::new();
        let mut mbps = Vec::new();
        for &ue in &ues {
            let c = direct_capacity(net, gnb, ue, t0)?;
            let g = capacity_goodput(c, link_streams(net, gnb, ue)?, table, bw, opts.overhead)?;
            phase2.push(c / u);
            mbps.push(g.goodput_mbps / u);
        }
        return Ok(SlotResult {
            phase1: None,
            phase1_mbps: 0.0,
            phase2,
            phase2_mbps: mbps,
            infeasible: false,
        });
    }
    let mut r1 = f64::INFINITY;
    let mut r1_mbps = f64::INFINITY;
    for &ru in &rus {
        let c = direct_capacity(net, gnb, ru, t0)?;
        let g = capacity_goodput(c, link_streams(net, gnb, ru)?, table, bw, opts.overhead)?;
        r1 = r1.min(c);
        r1_mbps = r1_mbps.min(g.goodput_mbps);
    }
    let mut tx = vec![gnb];
    tx.extend(&rus);
    let p2 = phase2(net, &tx, &ues, sync, csi, t0, opts)?;
    let mut mbps = Vec::with_capacity(ues.len());
    for streams in &p2.stream_sinr {
        let mut total = 0.0;
        for sinrs in streams {
            let eff = effective_snr_linear(sinrs)?;
            total += max_throughput(10.0 * eff.log10(), table, bw, opts.overhead)?.goodput_mbps;
        }
        mbps.push(total);
    }
    Ok(SlotResult {
        phase1: Some(r1),
        phase1_mbps: r1_mbps,
        phase2: p2.per_ue_rate_bpshz,
        phase2_mbps: mbps,
        infeasible: p2.zf_infeasible,
    })
}

/// One coherent two-phase downlink round, averaged over
/// `scenario.duration_slots` consecutive slots.
pub fn run_downlink_round(
    scenario: &Scenario,
    sync: &SyncState,
    csi: CsiSource,
    opts: &DownlinkOptions,
) -> Result<DownlinkRound> {
    let net = Network::new(scenario, &opts.channel);
    run_downlink_round_on(&net, sync, csi, opts)
}

/// As [`run_downlink_round`] on an already built network.
pub fn run_downlink_round_on(
    net: &Network,
    sync: &SyncState,
    csi: CsiSource,
    opts: &DownlinkOptions,
) -> Result<DownlinkRound> {
    let scenario = &net.scenario;
    let slots = scenario.duration_slots.max(1);
    let ue_count = scenario.ues().count();
    if ue_count == 0 {
        return Err(Error::arg("downlink round needs at least one UE"));
    }
    let mut rng = seeding::rng(&[scenario.seed, seeding::tag::SYNC]);
    let mut state = sync.clone();
    let mut acc = DownlinkRound {
        phase1_rate_bpshz: None,
        phase2_rates_bpshz: vec![0.0; ue_count],
        time_split: 0.0,
        end_to_end_rates_bpshz: vec![0.0; ue_count],
        end_to_end_mbps: vec![0.0; ue_count],
        zf_infeasible: false,
        active_rus: scenario.rus().map(|n| n.id).collect(),
    };
    let w = 1.0 / slots as f64;
    for slot in 0..slots {
        let t0 = slot as f64 * scenario.ofdm.slot_duration_s();
        let r = downlink_slot(net, &state, csi, t0, opts)?;
        let (e2e, e2e_mbps, split) = match r.phase1 {
            None => (r.phase2.clone(), r.phase2_mbps.clone(), 0.0),
            Some(r1) => {
                let (rates, split) = cascade(r1, &r.phase2, opts.time_split);
                let (mbps, _) = cascade(r.phase1_mbps, &r.phase2_mbps, opts.time_split);
                (rates, mbps, split)
            }
        };
        if let Some(r1) = r.phase1 {
            *acc.phase1_rate_bpshz.get_or_insert(0.0) += w * r1;
        }
        for u in 0..ue_count {
            acc.phase2_rates_bpshz[u] += w * r.phase2[u];
            acc.end_to_end_rates_bpshz[u] += w * e2e[u];
            acc.end_to_end_mbps[u] += w * e2e_mbps[u];
        }
        acc.time_split += w * split;
        acc.zf_infeasible |= r.infeasible;
        state = evolve_phase_noise(&state, &mut rng);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuObjective {
    /// Sum over UEs of the end-to-end rate.
    #[default]
    MaxEndToEnd,
}

/// Candidates ordered by decreasing gNB-to-RU capacity.
pub fn rank_rus(scenario: &Scenario, candidates: &[NodeId], opts: &DownlinkOptions) -> Result<Vec<(NodeId, f64)>> {
    let net = Network::new(scenario, &opts.channel);
    let gnb = scenario.gnb().ok_or_else(|| Error::arg("scenario has no gNB"))?.id;
    let mut ranked = candidates
        .iter()
        .map(|&id| Ok((id, direct_capacity(&net, gnb, id, 0.0)?)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

fn objective_value(
    scenario: &Scenario,
    rus: &[NodeId],
    sync: &SyncState,
    csi: CsiSource,
    objective: RuObjective,
    opts: &DownlinkOptions,
) -> Result<f64> {
    let round = run_downlink_round(&scenario.with_rus(rus), sync, csi, opts)?;
    Ok(match objective {
        RuObjective::MaxEndToEnd => round.sum_rate_bpshz(),
    })
}

/// Best rate-ordered prefix of `candidates`; ties keep the shorter prefix.
pub fn select_active_rus(
    scenario: &Scenario,
    candidates: &[NodeId],
    sync: &SyncState,
    csi: CsiSource,
    objective: RuObjective,
    opts: &DownlinkOptions,
) -> Result<Vec<NodeId>> {
    let ranked: Vec<NodeId> = rank_rus(scenario, candidates, opts)?
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 0..=ranked.len() {
        let v = objective_value(scenario, &ranked[..k], sync, csi, objective, opts)?;
        if v > best.0 {
            best = (v, k);
        }
    }
    Ok(ranked[..best.1].to_vec())
}

/// Oracle over all `2^K` subsets, `K <= 8`.
pub fn select_active_rus_exhaustive(
    scenario: &Scenario,
    candidates: &[NodeId],
    sync: &SyncState,
    csi: CsiSource,
    objective: RuObjective,
    opts: &DownlinkOptions,
) -> Result<(Vec<NodeId>, f64)> {
    if candidates.len() > 8 {
        return Err(Error::arg(format!(
            "exhaustive RU search limited to 8 candidates, got {}",
            candidates.len()
        )));
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for mask in 0u32..(1 << candidates.len()) {
        let subset: Vec<NodeId> = candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &id)| id)
            .collect();
        let v = objective_value(scenario, &subset, sync, csi, objective, opts)?;
        if v > best.1 {
            best = (subset, v);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UplinkOptions {
    /// Age of the receivers' channel estimates.
    pub csi_age_s: f64,
    /// Alamouti blocks per UE in the bit-level simulation.
    pub blocks: usize,
    pub fusion: FusionStrategy,
    #[serde(skip)]
    pub channel: ChannelOptions,
    pub overhead: f64,
}

impl Default for UplinkOptions {
    fn default() -> Self {
        Self {
            csi_age_s: 0.5e-3,
            blocks: 32,
            fusion: FusionStrategy::ReliabilityWeighted,
            channel: ChannelOptions::default(),
            overhead: DEFAULT_OVERHEAD,
        }
    }
}

/// What one receiving node contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverReport {
    pub node: NodeId,
    /// Copy dropped because the node's front-haul cannot carry any MCS.
    pub erased: bool,
    pub blocks: Vec<DetectionReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UplinkRound {
    /// gNB first, then RUs in scenario order.
    pub per_ru_reports: Vec<ReceiverReport>,
    pub payload: Vec<Vec<bool>>,
    pub fused_bits: Vec<Vec<bool>>,
    pub fused_snr_db: Vec<f64>,
    pub per_ue_mcs: Vec<Option<usize>>,
    pub per_ue_throughput_mbps: Vec<f64>,
    pub active_rus: Vec<NodeId>,
}

impl UplinkRound {
    pub fn throughput_mbps(&self) -> f64 {
        self.per_ue_throughput_mbps.iter().sum()
    }

    /// Fraction of fused payload bits in error.
    pub fn bit_error_rate(&self) -> f64 {
        let (mut err, mut n) = (0usize, 0usize);
        for (p, f) in self.payload.iter().zip(&self.fused_bits) {
            err += p.iter().zip(f).filter(|(a, b)| a != b).count();
            n += p.len();
        }
        if n == 0 {
            0.0
        } else {
            err as f64 / n as f64
        }
    }
}

/// Does the RU's link to the gNB support the lowest MCS?
pub fn fronthaul_ok(net: &Network, ru: NodeId, gnb: NodeId, table: &McsTable, overhead: f64) -> Result<bool> {
    let c = direct_capacity(net, ru, gnb, 0.0)?;
    let r = capacity_goodput(
        c,
        link_streams(net, ru, gnb)?,
        &table.entries,
        net.scenario.ofdm.bandwidth_hz(),
        overhead,
    )?;
    Ok(r.chosen_mcs.is_some())
}

/// One non-coherent two-phase uplink round. Every UE Alamouti-encodes over
/// its two antennas; the gNB and each RU run ordered MMSE-SIC on aged channel
/// estimates; surviving RU copies are fused at the gNB.
pub fn run_uplink_round(
    scenario: &Scenario,
    sync: &SyncState,
    mcs: &McsTable,
    opts: &UplinkOptions,
) -> Result<UplinkRound> {
    let net = Network::new(scenario, &opts.channel);
    run_uplink_round_on(&net, sync, mcs, opts)
}

pub fn run_uplink_round_on(
    net: &Network,
    sync: &SyncState,
    mcs: &McsTable,
    opts: &UplinkOptions,
) -> Result<UplinkRound> {
    let s = &net.scenario;
    let gnb = s.gnb().ok_or_else(|| Error::arg("scenario has no gNB"))?.id;
    let ues: Vec<NodeId> = s.ues().map(|n| n.id).collect();
    if ues.is_empty() {
        return Err(Error::arg("uplink round needs at least one UE"));
    }
    for &u in &ues {
        if node_antennas(net, u)? != 2 {
            return Err(Error::arg(format!("UE {u} needs exactly two antennas for Alamouti")));
        }
    }
    let receivers: Vec<NodeId> = std::iter::once(gnb)
        .chain(s.nodes.iter().filter(|n| n.kind == NodeKind::Ru).map(|n| n.id))
        .collect();
    let noise_mw = dbm_to_mw(s.noise_power_dbm());
    let t_sym = s.ofdm.symbol_duration_s();
    let slots = s.duration_slots.max(1);
    let groups = net.groups();
    let qpsk = Constellation::new(Modulation::Qpsk);
    let bps = qpsk.bits_per_symbol;
    let antenna_mw: Vec<f64> = ues
        .iter()
        .map(|&u| s.node(u).map_or(0.0, |n| n.tx_power_mw() / 2.0))
        .collect();

    // Payload: `blocks` Alamouti blocks of two QPSK symbols per UE.
    let mut payload_rng = seeding::rng(&[s.seed, seeding::tag::PAYLOAD]);
    let payload: Vec<Vec<bool>> = ues
        .iter()
        .map(|_| {
            (0..opts.blocks * 2 * bps)
                .map(|_| payload_rng.random::<bool>())
                .collect()
        })
        .collect();
    let symbols: Vec<Vec<C64>> = payload
        .iter()
        .map(|bits| bits.chunks(bps).map(|c| qpsk.points[qpsk.index_of_bits(c)]).collect())
        .collect();

    let mut fused_sinr: Vec<Vec<f64>> = vec![vec![0.0; slots * groups * 2]; ues.len()];
    let mut reports = Vec::with_capacity(receivers.len());
    for &node in &receivers {
        let erased = node != gnb && !fronthaul_ok(net, node, gnb, mcs, opts.overhead)?;
        let node_cfo = sync.node(node).cfo_hz;
        // Estimation error and residual-CFO interference, as extra noise.
        let mut extra = 0.0;
        for (i, &u) in ues.iter().enumerate() {
            let traj = net.trajectory(node, u)?;
            let rx_mw = 2.0 * antenna_mw[i] * traj.mean_power();
            let rho = libm::j0(2.0 * PI * traj.doppler_hz * opts.csi_age_s);
            extra += rx_mw * 2.0 * (1.0 - rho).max(0.0);
            extra += rx_mw * uplink_cfo_ici(sync.node(u).cfo_hz - node_cfo, t_sym);
        }
        let noise_var = noise_mw + extra;
        let effective = |g: usize, t: f64| -> Result<CMatrix> {
            let blocks = ues
                .iter()
                .zip(&antenna_mw)
                .map(|(&u, &p)| Ok(net.channel(u, node, g, t - opts.csi_age_s)? * C64::from(p.sqrt())))
                .collect::<Result<Vec<_>>>()?;
            Ok(alamouti_effective_channel(&blocks))
        };
        for slot in 0..slots {
            let t = slot as f64 * s.ofdm.slot_duration_s();
            for g in 0..groups {
                let (_, sinrs) = sic_post_sinrs(&effective(g, t)?, noise_var)?;
                if !erased {
                    for (i, row) in fused_sinr.iter_mut().enumerate() {
                        for k in 0..2 {
                            row[(slot * groups + g) * 2 + k] += sinrs[2 * i + k];
                        }
                    }
                }
            }
        }

        // Bit-level pass at t = 0, cycling through the subcarrier groups.
        let mut noise_rng = seeding::rng(&[s.seed, seeding::tag::NOISE, node as u64]);
        let mut blocks_out = Vec::with_capacity(opts.blocks);
        for b in 0..opts.blocks {
            let g = b % groups;
            let h_est = effective(g, 0.0)?;
            let mut y: Option<CMatrix> = None;
            for (i, &u) in ues.iter().enumerate() {
                let h = net.channel(u, node, g, 0.0)? * C64::from(antenna_mw[i].sqrt());
                let block = alamouti_encode(symbols[i][2 * b], symbols[i][2 * b + 1]);
                let r = alamouti_receive(&h, &block);
                y = Some(match y {
                    None => r,
                    Some(acc) => acc + r,
                });
            }
            let mut y = y.expect("at least one UE");
            y.apply(|z| *z += complex_gaussian(&mut noise_rng, noise_mw));
            let obs = alamouti_effective_observation(&y);
            blocks_out.push(sic_detect(&obs, &h_est, &qpsk, noise_var)?);
        }
        reports.push(ReceiverReport {
            node,
            erased,
            blocks: blocks_out,
        });
    }

    let mut fused_bits = Vec::with_capacity(ues.len());
    for i in 0..ues.len() {
        // Bits of UE i in payload order: block-major, then symbol, then bit.
        let copies: Vec<Vec<_>> = reports
            .iter()
            .filter(|r| !r.erased)
            .map(|r| {
                r.blocks
                    .iter()
                    .flat_map(|rep| rep.bits[2 * i * bps..(2 * i + 2) * bps].iter().copied())
                    .collect()
            })
            .collect();
        let views: Vec<&[_]> = copies.iter().map(|c| c.as_slice()).collect();
        fused_bits.push(fuse_decisions(&views, opts.fusion)?);
    }

    let bw = s.ofdm.bandwidth_hz();
    let mut fused_snr_db = Vec::with_capacity(ues.len());
    let mut per_ue_mcs = Vec::with_capacity(ues.len());
    let mut per_ue_throughput_mbps = Vec::with_capacity(ues.len());
    for sinrs in &fused_sinr {
        let eff_db = 10.0 * effective_snr_linear(sinrs)?.log10();
        let r = max_throughput(eff_db, &mcs.entries, bw, opts.overhead)?;
        fused_snr_db.push(eff_db);
        per_ue_mcs.push(r.chosen_mcs);
        per_ue_throughput_mbps.push(r.goodput_mbps);
    }
    Ok(UplinkRound {
        per_ru_reports: reports,
        payload,
        fused_bits,
        fused_snr_db,
        per_ue_mcs,
        per_ue_throughput_mbps,
        active_rus: receivers[1..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::tests::downlink_setup;
    use crate::scenario::{MobilityLabel, MobilityProfile, NodeSpec, OfdmConfig};

    fn node(id: NodeId, kind: NodeKind, ant: usize, p: f64, pos: [f64; 3], v: f64) -> NodeSpec {
        NodeSpec {
            id,
            kind,
            num_antennas: ant,
            tx_power_dbm: p,
            position_m: pos,
            velocity_mps: [v, 0.0, 0.0],
        }
    }

    fn uplink_setup(rus: usize, seed: u64) -> Scenario {
        let mut nodes = vec![node(0, NodeKind::Gnb, 2, 35.0, [0.0; 3], 0.0)];
        for r in 0..rus {
            let a = r as f64 * 0.7;
            nodes.push(node(
                1 + r as u32,
                NodeKind::Ru,
                2,
                26.0,
                [300.0 + 40.0 * a.cos(), 40.0 * a.sin(), 0.0],
                0.0,
            ));
        }
        nodes.push(node(1000, NodeKind::Ue, 2, 23.0, [300.0, 5.0, 0.0], 0.0));
        nodes.push(node(1001, NodeKind::Ue, 2, 23.0, [310.0, -8.0, 0.0], 0.0));
        Scenario {
            nodes,
            ofdm: OfdmConfig::default(),
            mobility: MobilityProfile::named(MobilityLabel::Low),
            noise_figure_db: 7.0,
            seed,
            duration_slots: 1,
        }
    }

    #[test]
    fn cascade_examples() {
        let (r, split) = cascade(5.0, &[5.0], TimeSplit::Optimal);
        assert!((r[0] - 2.5).abs() < 1e-15);
        assert!((split - 0.5).abs() < 1e-15);
        let (r, _) = cascade(12.0, &[6.0], TimeSplit::Optimal);
        assert!((r[0] - 4.0).abs() < 1e-12);
        let (r, split) = cascade(12.0, &[6.0, 6.0], TimeSplit::FixedHalf);
        assert_eq!(r, vec![3.0, 3.0]);
        assert_eq!(split, 0.5);
        assert_eq!(cascade(0.0, &[0.0], TimeSplit::Optimal).0, vec![0.0]);
    }

    #[test]
    fn csi_source_parsing() {
        for c in [CsiSource::Perfect, CsiSource::Stale, CsiSource::Predicted] {
            assert_eq!(c.to_string().parse::<CsiSource>().unwrap(), c);
        }
        assert!("fresh".parse::<CsiSource>().is_err());
    }

    #[test]
    fn no_rus_is_direct_baseline() {
        let mut s = downlink_setup().with_rus(&[]);
        s.nodes.retain(|n| n.kind != NodeKind::Ue || n.id == 1000);
        let opts = DownlinkOptions::default();
        let round = run_downlink_round(&s, &SyncState::ideal(), CsiSource::Perfect, &opts).unwrap();
        let net = Network::new(&s, &opts.channel);
        let base = direct_capacity(&net, 0, 1000, 0.0).unwrap();
        assert!(round.phase1_rate_bpshz.is_none());
        assert!((round.end_to_end_rates_bpshz[0] - base).abs() < 1e-9);
        assert_eq!(round.time_split, 0.0);
    }

    #[test]
    fn downlink_round_accounting() {
        let s = downlink_setup();
        let round =
            run_downlink_round(&s, &SyncState::ideal(), CsiSource::Perfect, &DownlinkOptions::default()).unwrap();
        let r1 = round.phase1_rate_bpshz.unwrap();
        let (expect, split) = cascade(r1, &round.phase2_rates_bpshz, TimeSplit::Optimal);
        for (a, b) in round.end_to_end_rates_bpshz.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(split > 0.0 && split < 1.0);
        assert!((round.time_split - split).abs() < 1e-12);
        assert!(!round.zf_infeasible);
        // Phase 1 is the worst RU.
        let net = Network::new(&s, &ChannelOptions::default());
        let worst = s
            .rus()
            .map(|r| direct_capacity(&net, 0, r.id, 0.0).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!((r1 - worst).abs() < 1e-12);
    }

    #[test]
    fn infeasible_zf_is_flagged() {
        // One single-antenna transmitter cannot serve two 2-antenna UEs.
        let mut s = downlink_setup().with_rus(&[1]);
        s.nodes[0].num_antennas = 1;
        s.nodes[1].num_antennas = 1;
        let round =
            run_downlink_round(&s, &SyncState::ideal(), CsiSource::Perfect, &DownlinkOptions::default()).unwrap();
        assert!(round.zf_infeasible);
        assert!(round.end_to_end_rates_bpshz.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn stale_equals_perfect_at_zero_age() {
        let s = downlink_setup();
        let opts = DownlinkOptions {
            csi_age_s: 0.0,
            ..Default::default()
        };
        let a = run_downlink_round(&s, &SyncState::ideal(), CsiSource::Perfect, &opts).unwrap();
        let b = run_downlink_round(&s, &SyncState::ideal(), CsiSource::Stale, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_drops_a_dead_ru() {
        let mut s = downlink_setup();
        s.nodes.push(node(3, NodeKind::Ru, 2, 26.0, [5000.0, 0.0, 0.0], 0.0));
        let opts = DownlinkOptions::default();
        let chosen = select_active_rus(
            &s,
            &[1, 2, 3],
            &SyncState::ideal(),
            CsiSource::Perfect,
            RuObjective::MaxEndToEnd,
            &opts,
        )
        .unwrap();
        assert!(!chosen.contains(&3), "{chosen:?}");
        // The returned prefix is the best prefix.
        let ranked: Vec<NodeId> = rank_rus(&s, &[1, 2, 3], &opts)
            .unwrap()
            .into_iter()
            .map(|x| x.0)
            .collect();
        assert_eq!(*ranked.last().unwrap(), 3);
        let value = |rus: &[NodeId]| {
            run_downlink_round(&s.with_rus(rus), &SyncState::ideal(), CsiSource::Perfect, &opts)
                .unwrap()
                .sum_rate_bpshz()
        };
        let best = value(&chosen);
        for k in 0..=ranked.len() {
            assert!(value(&ranked[..k]) <= best);
        }
        let (_, oracle) = select_active_rus_exhaustive(
            &s,
            &[1, 2, 3],
            &SyncState::ideal(),
            CsiSource::Perfect,
            RuObjective::MaxEndToEnd,
            &opts,
        )
        .unwrap();
        assert!(oracle >= best);
    }

    #[test]
    fn colocated_rus_are_all_selected() {
        let mut s = downlink_setup();
        for n in s.nodes.iter_mut().filter(|n| n.kind == NodeKind::Ru) {
            n.position_m = [1.0, 0.0, 0.0];
        }
        let chosen = select_active_rus(
            &s,
            &[1, 2],
            &SyncState::ideal(),
            CsiSource::Perfect,
            RuObjective::MaxEndToEnd,
            &DownlinkOptions::default(),
        )
        .unwrap();
        assert_eq!(chosen.len(), 2);
    }

    #[test]
    fn uplink_payload_and_fusion_shapes() {
        let s = uplink_setup(2, 3);
        let r = run_uplink_round(&s, &SyncState::ideal(), &McsTable::default(), &UplinkOptions::default()).unwrap();
        assert_eq!(r.per_ru_reports.len(), 3);
        assert_eq!(r.per_ru_reports[0].node, 0);
        for (p, f) in r.payload.iter().zip(&r.fused_bits) {
            assert_eq!(p.len(), f.len());
            assert_eq!(p.len(), 32 * 2 * 2);
        }
        assert!(r.bit_error_rate() < 0.1, "{}", r.bit_error_rate());
        assert_eq!(r.active_rus, vec![1, 2]);
    }

    #[test]
    fn uplink_ru_superset_never_worse() {
        for seed in 0..5 {
            let mut prev: Option<UplinkRound> = None;
            for k in [0, 1, 2, 4, 8] {
                let s = uplink_setup(8, seed);
                let ids: Vec<NodeId> = (1..=k as u32).collect();
                let r = run_uplink_round(
                    &s.with_rus(&ids),
                    &SyncState::ideal(),
                    &McsTable::default(),
                    &UplinkOptions::default(),
                )
                .unwrap();
                if let Some(p) = &prev {
                    for u in 0..2 {
                        assert!(r.fused_snr_db[u] >= p.fused_snr_db[u] - 1e-12);
                        assert!(r.per_ue_mcs[u] >= p.per_ue_mcs[u]);
                        assert!(r.per_ue_throughput_mbps[u] >= p.per_ue_throughput_mbps[u]);
                    }
                }
                prev = Some(r);
            }
        }
    }

    #[test]
    fn uplink_ignores_phase_offsets() {
        let s = uplink_setup(2, 4);
        let mut sync = SyncState::ideal();
        for id in [1, 2, 1000, 1001] {
            sync.nodes.entry(id).or_default().phase_offset_rad = 0.3 * id as f64 % 3.0;
        }
        let a = run_uplink_round(&s, &SyncState::ideal(), &McsTable::default(), &UplinkOptions::default()).unwrap();
        let b = run_uplink_round(&s, &sync, &McsTable::default(), &UplinkOptions::default()).unwrap();
        assert_eq!(a.per_ue_throughput_mbps, b.per_ue_throughput_mbps);
        assert_eq!(a.fused_bits, b.fused_bits);
    }

    #[test]
    fn zero_rus_is_gnb_only() {
        let s = uplink_setup(0, 5);
        let r = run_uplink_round(&s, &SyncState::ideal(), &McsTable::default(), &UplinkOptions::default()).unwrap();
        assert_eq!(r.per_ru_reports.len(), 1);
        assert!(r.active_rus.is_empty());
    }

    #[test]
    fn distant_ru_copy_is_erased() {
        let mut s = uplink_setup(1, 6);
        s.nodes[1].position_m = [300.0, 3.0, 0.0];
        s.nodes[0].position_m = [-1.0e5, 0.0, 0.0];
        let r = run_uplink_round(&s, &SyncState::ideal(), &McsTable::default(), &UplinkOptions::default()).unwrap();
        assert!(r.per_ru_reports[1].erased);
    }
}
