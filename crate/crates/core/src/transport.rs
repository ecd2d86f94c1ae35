//! Neighbour-only message passing between simulated ranks.
//!
//! Ranks form a path (non-periodic) or a ring (periodic). A rank may only
//! talk to its previous and next neighbour; the solver code is written
//! against the [`Transport`] trait so another message-passing backend can
//! stand in for the in-process one provided here.
//!
//! The in-process backend runs every rank body on its own thread with one
//! unbounded channel per directed neighbour link. Sends never block, so the
//! send-both-then-receive-both exchange pattern cannot deadlock.

use std::any::Any;
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{Result, TdsError};
use crate::layout::GroupedField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Prev,
    Next,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::Prev => "previous",
            Side::Next => "next",
        }
    }
}

/// Message kinds are named from the receiver's point of view: a `HaloLow`
/// message fills the receiver's low halo, so it travels towards `Next`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    HaloLow,
    HaloHigh,
    BoundaryLow,
    BoundaryHigh,
    /// One-off exchange of solve-invariant boundary coefficients.
    CoefficientLow,
    CoefficientHigh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborMessage {
    pub kind: MessageKind,
    /// Solve epoch the message belongs to.
    pub tag: u64,
    pub payload: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    /// Exchange phases this rank took part in.
    pub rounds: u64,
}

pub trait Transport {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn is_cyclic(&self) -> bool;
    fn has_neighbor(&self, side: Side) -> bool;
    fn send(&mut self, side: Side, msg: NeighborMessage) -> Result<()>;
    fn recv(&mut self, side: Side) -> Result<NeighborMessage>;
    fn epoch(&self) -> u64;
    /// Advances and returns the solve epoch used to tag messages.
    fn begin_epoch(&mut self) -> u64;
    fn counters(&self) -> Counters;
    fn note_round(&mut self);
}

/// In-process rank state handed to each rank body.
pub struct RankContext {
    rank: usize,
    size: usize,
    cyclic: bool,
    to_prev: Option<Sender<NeighborMessage>>,
    to_next: Option<Sender<NeighborMessage>>,
    from_prev: Option<Receiver<NeighborMessage>>,
    from_next: Option<Receiver<NeighborMessage>>,
    gather_tx: Sender<(usize, Vec<f64>)>,
    gather_rx: Option<Receiver<(usize, Vec<f64>)>>,
    scatter_tx: Option<Vec<Sender<Vec<f64>>>>,
    scatter_rx: Receiver<Vec<f64>>,
    epoch: u64,
    counters: Counters,
}

impl RankContext {
    /// Wires `p` contexts into a path or ring.
    pub fn wire(p: usize, cyclic: bool) -> Result<Vec<RankContext>> {
        if p == 0 {
            return Err(TdsError::Config("rank count must be >= 1".into()));
        }
        let mut to_prev: Vec<Option<Sender<NeighborMessage>>> = (0..p).map(|_| None).collect();
        let mut to_next: Vec<Option<Sender<NeighborMessage>>> = (0..p).map(|_| None).collect();
        let mut from_prev: Vec<Option<Receiver<NeighborMessage>>> = (0..p).map(|_| None).collect();
        let mut from_next: Vec<Option<Receiver<NeighborMessage>>> = (0..p).map(|_| None).collect();
        for r in 0..p {
            if cyclic || r + 1 < p {
                let next = (r + 1) % p;
                let (tx, rx) = channel();
                to_next[r] = Some(tx);
                from_prev[next] = Some(rx);
            }
            if cyclic || r > 0 {
                let prev = (r + p - 1) % p;
                let (tx, rx) = channel();
                to_prev[r] = Some(tx);
                from_next[prev] = Some(rx);
            }
        }
        let (gather_tx, gather_rx) = channel();
        let (scatter_txs, scatter_rxs): (Vec<_>, Vec<_>) = (0..p).map(|_| channel()).unzip();
        let mut gather_rx = Some(gather_rx);
        let mut scatter_txs = Some(scatter_txs);
        let contexts = (0..p)
            .zip(scatter_rxs)
            .map(|(r, scatter_rx)| RankContext {
                rank: r,
                size: p,
                cyclic,
                to_prev: to_prev[r].take(),
                to_next: to_next[r].take(),
                from_prev: from_prev[r].take(),
                from_next: from_next[r].take(),
                gather_tx: gather_tx.clone(),
                gather_rx: if r == 0 { gather_rx.take() } else { None },
                scatter_tx: if r == 0 { scatter_txs.take() } else { None },
                scatter_rx,
                epoch: 0,
                counters: Counters::default(),
            })
            .collect();
        Ok(contexts)
    }

    /// A single rank, wired to itself when `cyclic`. Usable without threads
    /// because sends never block.
    pub fn solo(cyclic: bool) -> RankContext {
        Self::wire(1, cyclic)
            .expect("one rank is always valid")
            .pop()
            .expect("one context")
    }
}

impl Transport for RankContext {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn is_cyclic(&self) -> bool {
        self.cyclic
    }

    fn has_neighbor(&self, side: Side) -> bool {
        match side {
            Side::Prev => self.to_prev.is_some(),
            Side::Next => self.to_next.is_some(),
        }
    }

    fn send(&mut self, side: Side, msg: NeighborMessage) -> Result<()> {
        let tx = match side {
            Side::Prev => self.to_prev.as_ref(),
            Side::Next => self.to_next.as_ref(),
        }
        .ok_or(TdsError::NoNeighbor {
            rank: self.rank,
            side: side.name(),
        })?;
        let bytes = (msg.payload.len() * std::mem::size_of::<f64>()) as u64;
        tx.send(msg)
            .map_err(|_| TdsError::Disconnected { rank: self.rank })?;
        self.counters.messages_sent += 1;
        self.counters.bytes_sent += bytes;
        Ok(())
    }

    fn recv(&mut self, side: Side) -> Result<NeighborMessage> {
        let rx = match side {
            Side::Prev => self.from_prev.as_ref(),
            Side::Next => self.from_next.as_ref(),
        }
        .ok_or(TdsError::NoNeighbor {
            rank: self.rank,
            side: side.name(),
        })?;
        rx.recv()
            .map_err(|_| TdsError::Disconnected { rank: self.rank })
    }

    fn epoch(&self) -> u64 {
        self.epoch
    }

    fn begin_epoch(&mut self) -> u64 {
        self.epoch += 1;
        self.epoch
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn note_round(&mut self) {
        self.counters.rounds += 1;
    }
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

/// Runs `body` once per rank, each on its own thread, and returns the
/// results in rank order. A panicking rank is reported as
/// [`TdsError::RankPanic`]; its neighbours see a disconnected channel
/// instead of blocking forever.
pub fn spawn_ranks<R, F>(p: usize, cyclic: bool, body: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut RankContext) -> R + Sync,
{
    let contexts = RankContext::wire(p, cyclic)?;
    let body = &body;
    let joined: Vec<std::thread::Result<R>> = std::thread::scope(|scope| {
        let handles: Vec<_> = contexts
            .into_iter()
            .map(|mut ctx| scope.spawn(move || body(&mut ctx)))
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });
    joined
        .into_iter()
        .enumerate()
        .map(|(rank, r)| {
            r.map_err(|payload| TdsError::RankPanic {
                rank,
                message: panic_message(payload),
            })
        })
        .collect()
}

fn expect_message<T: Transport>(
    ctx: &mut T,
    side: Side,
    kind: MessageKind,
    len: usize,
) -> Result<Vec<f64>> {
    let msg = ctx.recv(side)?;
    let tag = ctx.epoch();
    if msg.kind != kind || msg.tag != tag {
        return Err(TdsError::TagMismatch {
            rank: ctx.rank(),
            expected: format!("{kind:?}@{tag}"),
            received: format!("{:?}@{}", msg.kind, msg.tag),
        });
    }
    if msg.payload.len() != len {
        return Err(TdsError::ShapeMismatch(format!(
            "rank {}: {kind:?} payload of {} values, expected {len}",
            ctx.rank(),
            msg.payload.len()
        )));
    }
    Ok(msg.payload)
}

/// What came back from one symmetric edge exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeValues {
    /// Sent by the previous rank (its high edge), if there is one.
    pub from_prev: Option<Vec<f64>>,
    /// Sent by the next rank (its low edge), if there is one.
    pub from_next: Option<Vec<f64>>,
}

/// One exchange round: `high` goes to the next rank, `low` to the previous
/// one, and the counterparts are received. Counts as one round.
fn exchange_edges<T: Transport>(
    ctx: &mut T,
    kinds: (MessageKind, MessageKind),
    low: Vec<f64>,
    high: Vec<f64>,
) -> Result<EdgeValues> {
    let (to_next_kind, to_prev_kind) = kinds;
    let tag = ctx.epoch();
    let (low_len, high_len) = (low.len(), high.len());
    if ctx.has_neighbor(Side::Next) {
        ctx.send(
            Side::Next,
            NeighborMessage {
                kind: to_next_kind,
                tag,
                payload: high,
            },
        )?;
    }
    if ctx.has_neighbor(Side::Prev) {
        ctx.send(
            Side::Prev,
            NeighborMessage {
                kind: to_prev_kind,
                tag,
                payload: low,
            },
        )?;
    }
    let from_prev = if ctx.has_neighbor(Side::Prev) {
        Some(expect_message(ctx, Side::Prev, to_next_kind, high_len)?)
    } else {
        None
    };
    let from_next = if ctx.has_neighbor(Side::Next) {
        Some(expect_message(ctx, Side::Next, to_prev_kind, low_len)?)
    } else {
        None
    };
    ctx.note_round();
    Ok(EdgeValues {
        from_prev,
        from_next,
    })
}

/// A rank-local grouped field with `depth` ghost rows on either side of
/// every line.
#[derive(Debug, Clone)]
pub struct HaloField<'a> {
    pub interior: &'a GroupedField,
    /// Per group, `depth` rows of `sz` lanes for positions `-depth..0`.
    pub low: Vec<f64>,
    /// Per group, `depth` rows of `sz` lanes for positions `n..n + depth`.
    pub high: Vec<f64>,
    pub depth: usize,
}

impl<'a> HaloField<'a> {
    /// Halo-extended field with zero ghost rows, as seen by a rank without
    /// neighbours.
    pub fn zero_filled(interior: &'a GroupedField, depth: usize) -> Self {
        let len = interior.layout().sz() * depth * interior.layout().n_groups();
        Self {
            interior,
            low: vec![0.0; len],
            high: vec![0.0; len],
            depth,
        }
    }

    /// The `sz` lane values at `position` of group `g`; `position` may reach
    /// `depth` rows into either halo.
    pub fn row(&self, g: usize, position: isize) -> &[f64] {
        let sz = self.interior.layout().sz();
        let n = self.interior.layout().n() as isize;
        let d = self.depth as isize;
        if position < 0 {
            assert!(position >= -d, "position {position} beyond halo depth {d}");
            let r = (position + d) as usize;
            let base = sz * (g * self.depth + r);
            &self.low[base..base + sz]
        } else if position >= n {
            assert!(
                position < n + d,
                "position {position} beyond halo depth {d}"
            );
            let r = (position - n) as usize;
            let base = sz * (g * self.depth + r);
            &self.high[base..base + sz]
        } else {
            let base = sz * position as usize;
            &self.interior.group(g)[base..base + sz]
        }
    }
}

/// Fills `depth` ghost rows on both ends of every line from the neighbouring
/// ranks. Ends of a non-periodic path are zero-filled; boundary stencils
/// never read them.
pub fn exchange_halo<'a, T: Transport>(
    ctx: &mut T,
    field: &'a GroupedField,
    depth: usize,
) -> Result<HaloField<'a>> {
    let layout = field.layout();
    let (sz, n) = (layout.sz(), layout.n());
    if depth > n {
        return Err(TdsError::Config(format!(
            "halo depth {depth} exceeds local extent {n}"
        )));
    }
    let mut halo = HaloField::zero_filled(field, depth);
    if depth == 0 {
        return Ok(halo);
    }
    let mut bottom = Vec::with_capacity(halo.low.len());
    let mut top = Vec::with_capacity(halo.high.len());
    for g in 0..layout.n_groups() {
        let group = field.group(g);
        bottom.extend_from_slice(&group[..sz * depth]);
        top.extend_from_slice(&group[sz * (n - depth)..]);
    }
    let edges = exchange_edges(
        ctx,
        (MessageKind::HaloLow, MessageKind::HaloHigh),
        bottom,
        top,
    )?;
    if let Some(low) = edges.from_prev {
        halo.low = low;
    }
    if let Some(high) = edges.from_next {
        halo.high = high;
    }
    Ok(halo)
}

/// Sends this rank's first and last boundary rows to the previous and next
/// rank and receives their counterparts: the previous rank's last row and
/// the next rank's first row.
pub fn exchange_boundary<T: Transport>(
    ctx: &mut T,
    d_first: &[f64],
    d_last: &[f64],
) -> Result<EdgeValues> {
    exchange_edges(
        ctx,
        (MessageKind::BoundaryLow, MessageKind::BoundaryHigh),
        d_first.to_vec(),
        d_last.to_vec(),
    )
}

/// Same pattern for the solve-invariant coefficients, done once per plan.
pub fn exchange_coefficients<T: Transport>(
    ctx: &mut T,
    first: &[f64],
    last: &[f64],
) -> Result<EdgeValues> {
    exchange_edges(
        ctx,
        (MessageKind::CoefficientLow, MessageKind::CoefficientHigh),
        first.to_vec(),
        last.to_vec(),
    )
}

/// Collects every rank's slice on rank 0 in rank order. Testing only: this
/// is the one operation that talks to a non-neighbour, over its own channel
/// so the neighbour counters are untouched.
pub fn gather_to_root(ctx: &RankContext, slice: &[f64]) -> Result<Option<Vec<Vec<f64>>>> {
    if ctx.rank != 0 {
        ctx.gather_tx
            .send((ctx.rank, slice.to_vec()))
            .map_err(|_| TdsError::Disconnected { rank: ctx.rank })?;
        return Ok(None);
    }
    let rx = ctx
        .gather_rx
        .as_ref()
        .expect("rank 0 owns the gather channel");
    let mut parts: Vec<Option<Vec<f64>>> = vec![None; ctx.size];
    parts[0] = Some(slice.to_vec());
    for _ in 1..ctx.size {
        let (r, data) = rx.recv().map_err(|_| TdsError::Disconnected { rank: 0 })?;
        parts[r] = Some(data);
    }
    Ok(Some(
        parts
            .into_iter()
            .map(|p| p.expect("every rank sent"))
            .collect(),
    ))
}

/// Gathers rank-local slices of a grouped field (split along the line
/// direction) into the global field on rank 0.
pub fn gather_field(ctx: &RankContext, local: &GroupedField) -> Result<Option<GroupedField>> {
    let mut msg = vec![local.layout().n() as f64];
    msg.extend_from_slice(local.data());
    let Some(parts) = gather_to_root(ctx, &msg)? else {
        return Ok(None);
    };
    let fields = parts
        .into_iter()
        .map(|p| {
            let layout = local.layout().with_line_extent(p[0] as usize)?;
            GroupedField::from_data(layout, p[1..].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    GroupedField::concat_positions(&fields).map(Some)
}

/// Rank 0 hands `parts[r]` to rank `r`; other ranks pass `None`.
pub fn scatter_from_root(ctx: &RankContext, parts: Option<Vec<Vec<f64>>>) -> Result<Vec<f64>> {
    if let Some(txs) = &ctx.scatter_tx {
        let parts = parts.ok_or_else(|| TdsError::Config("rank 0 must supply the parts".into()))?;
        if parts.len() != ctx.size {
            return Err(TdsError::Config(format!(
                "{} parts for {} ranks",
                parts.len(),
                ctx.size
            )));
        }
        for (tx, part) in txs.iter().zip(parts) {
            tx.send(part)
                .map_err(|_| TdsError::Disconnected { rank: 0 })?;
        }
    }
    ctx.scatter_rx
        .recv()
        .map_err(|_| TdsError::Disconnected { rank: ctx.rank })
}
