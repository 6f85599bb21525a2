//! A synchronous, in-process message bus: the only channel between agents.
//!
//! Payloads posted in round `s` become readable in round `s + 1`, and only by
//! the poster and its graph neighbors.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::graph::Graph;
use crate::{Error, Result};

/// The reader's own payload and `(neighbor, payload)` pairs.
pub type Inbox<P> = (Arc<P>, Vec<(usize, Arc<P>)>);

/// Approximate wire size of a payload, for communication accounting.
pub trait PayloadSize {
    fn size_bytes(&self) -> usize;
}

/// One read of `owner`'s payload by `reader`, made during `round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub round: usize,
    pub reader: usize,
    pub owner: usize,
}

/// Every read attempted through the bus, including refused ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessLog {
    records: Vec<Access>,
}

impl AccessLog {
    pub fn records(&self) -> &[Access] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Re-checks every record against `graph`; returns the offending ones.
    pub fn violations(&self, graph: &Graph) -> Vec<Access> {
        self.records
            .iter()
            .filter(|a| a.reader != a.owner && !graph.are_neighbors(a.reader, a.owner))
            .copied()
            .collect()
    }
}

/// Round-synchronous mailbox over a fixed graph.
#[derive(Debug)]
pub struct RoundBus<P> {
    graph: Graph,
    round: usize,
    current: Vec<Option<Arc<P>>>,
    previous: Option<Vec<Arc<P>>>,
    log: AccessLog,
    round_bytes: Vec<usize>,
}

impl<P: PayloadSize> RoundBus<P> {
    pub fn new(graph: Graph) -> Self {
        let agents = graph.agent_count();
        RoundBus {
            graph,
            round: 0,
            current: (0..agents).map(|_| None).collect(),
            previous: None,
            log: AccessLog::default(),
            round_bytes: Vec::new(),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Index of the round currently accepting posts.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn log(&self) -> &AccessLog {
        &self.log
    }

    /// Bytes posted in each completed round.
    pub fn round_bytes(&self) -> &[usize] {
        &self.round_bytes
    }

    fn check_agent(&self, i: usize) -> Result<()> {
        if i >= self.graph.agent_count() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.graph.agent_count(),
            });
        }
        Ok(())
    }

    pub fn post(&mut self, agent: usize, payload: P) -> Result<()> {
        self.check_agent(agent)?;
        let slot = &mut self.current[agent];
        if slot.is_some() {
            return Err(Error::DoublePost {
                agent,
                round: self.round,
            });
        }
        *slot = Some(Arc::new(payload));
        Ok(())
    }

    /// Closes the round once every agent has posted.
    pub fn advance(&mut self) -> Result<()> {
        if self.current.iter().any(Option::is_none) {
            return Err(Error::RoundIncomplete { round: self.round });
        }
        let posted: Vec<Arc<P>> = self
            .current
            .iter_mut()
            .map(|slot| slot.take().expect("checked above"))
            .collect();
        self.round_bytes
            .push(posted.iter().map(|p| p.size_bytes()).sum());
        self.previous = Some(posted);
        self.round += 1;
        Ok(())
    }

    /// `owner`'s payload from the last completed round, if `reader` may see it.
    pub fn request(&mut self, reader: usize, owner: usize) -> Result<Arc<P>> {
        self.check_agent(reader)?;
        self.check_agent(owner)?;
        self.log.records.push(Access {
            round: self.round,
            reader,
            owner,
        });
        if reader != owner && !self.graph.are_neighbors(reader, owner) {
            log::warn!(
                "agent {reader} requested agent {owner}'s payload in round {}",
                self.round
            );
            return Err(Error::InformationStructureViolation {
                reader,
                owner,
                round: self.round,
            });
        }
        let previous = self.previous.as_ref().ok_or(Error::RoundIncomplete {
            round: self.round.saturating_sub(1),
        })?;
        Ok(previous[owner].clone())
    }

    /// The reader's own payload followed by its neighbors', in ascending id order.
    pub fn collect(&mut self, reader: usize) -> Result<Inbox<P>> {
        let own = self.request(reader, reader)?;
        let neighbors = self.graph.neighbors(reader)?.to_vec();
        let mut out = Vec::with_capacity(neighbors.len());
        for j in neighbors {
            out.push((j, self.request(reader, j)?));
        }
        Ok((own, out))
    }
}
