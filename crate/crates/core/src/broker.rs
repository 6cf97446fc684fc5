//! Partitioned-log message broker with consumer groups. Consumers either
//! pull and commit offsets themselves or register a push handler that the
//! broker calls during its ticks. Delivery is at-least-once.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::fnv1a64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("topic {0} already exists")]
    DuplicateTopic(String),
    #[error("a topic needs at least one partition")]
    NoPartitions,
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("group {0} already exists")]
    DuplicateGroup(String),
    #[error("group {group} has no member {member}")]
    UnknownMember { group: String, member: String },
    #[error("group {group} uses {mode:?} delivery")]
    WrongMode { group: String, mode: DeliveryMode },
    #[error("offset {offset} is past the end of partition {partition}")]
    OffsetOutOfRange { partition: u32, offset: u64 },
    #[error("unknown partition {0}")]
    UnknownPartition(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryMode {
    Pull,
    Push,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub partition: u32,
    pub offset: u64,
    pub key: Vec<u8>,
    pub payload: Vec<u8>,
}

/// Raised by a push handler to have the message delivered again next tick.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("handler failed: {0}")]
pub struct HandlerFailure(pub String);

pub type PushHandler = Box<dyn FnMut(&Message) -> Result<(), HandlerFailure> + Send>;

pub fn partition_for(key: &[u8], partitions: u32) -> u32 {
    (fnv1a64(key) % partitions as u64) as u32
}

struct Group {
    topic: String,
    mode: DeliveryMode,
    members: BTreeSet<String>,
    assignment: BTreeMap<u32, String>,
    committed: Vec<u64>,
    position: Vec<u64>,
    handlers: BTreeMap<String, PushHandler>,
}

impl Group {
    /// Round-robin over sorted members; positions fall back to commits.
    fn rebalance(&mut self) {
        let members: Vec<_> = self.members.iter().cloned().collect();
        self.assignment.clear();
        if !members.is_empty() {
            for p in 0..self.committed.len() as u32 {
                self.assignment.insert(p, members[p as usize % members.len()].clone());
            }
        }
        self.position.clone_from(&self.committed);
    }

    fn partitions_of(&self, member: &str) -> Vec<u32> {
        self.assignment
            .iter()
            .filter(|(_, m)| m.as_str() == member)
            .map(|(p, _)| *p)
            .collect()
    }
}

/// Publications waiting in the hand-off queue.
#[derive(Debug, Clone)]
pub struct Publisher(mpsc::Sender<(String, Vec<u8>, Vec<u8>)>);

impl Publisher {
    /// Queues a message; it is appended at the next broker tick.
    pub fn publish(&self, topic: &str, key: &[u8], payload: &[u8]) -> bool {
        self.0.send((topic.to_string(), key.to_vec(), payload.to_vec())).is_ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickReport {
    pub appended: u64,
    pub rejected: u64,
    pub delivered: u64,
    pub failures: u64,
}

pub struct Broker {
    topics: BTreeMap<String, Vec<Vec<Message>>>,
    groups: BTreeMap<String, Group>,
    tx: mpsc::Sender<(String, Vec<u8>, Vec<u8>)>,
    rx: mpsc::Receiver<(String, Vec<u8>, Vec<u8>)>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new()
    }
}

impl Broker {
    pub fn new() -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            topics: BTreeMap::new(),
            groups: BTreeMap::new(),
            tx,
            rx,
        }
    }

    pub fn publisher(&self) -> Publisher {
        Publisher(self.tx.clone())
    }

    pub fn create_topic(&mut self, name: &str, partitions: u32) -> Result<(), BrokerError> {
        if partitions == 0 {
            return Err(BrokerError::NoPartitions);
        }
        if self.topics.contains_key(name) {
            return Err(BrokerError::DuplicateTopic(name.into()));
        }
        self.topics
            .insert(name.into(), (0..partitions).map(|_| Vec::new()).collect());
        Ok(())
    }

    fn topic(&self, name: &str) -> Result<&Vec<Vec<Message>>, BrokerError> {
        self.topics
            .get(name)
            .ok_or_else(|| BrokerError::UnknownTopic(name.into()))
    }

    pub fn partitions(&self, topic: &str) -> Result<u32, BrokerError> {
        Ok(self.topic(topic)?.len() as u32)
    }

    /// The full log of one partition.
    pub fn log(&self, topic: &str, partition: u32) -> Result<&[Message], BrokerError> {
        self.topic(topic)?
            .get(partition as usize)
            .map(Vec::as_slice)
            .ok_or(BrokerError::UnknownPartition(partition))
    }

    pub fn publish(&mut self, topic: &str, key: &[u8], payload: &[u8]) -> Result<(u32, u64), BrokerError> {
        let parts = self
            .topics
            .get_mut(topic)
            .ok_or_else(|| BrokerError::UnknownTopic(topic.into()))?;
        let partition = partition_for(key, parts.len() as u32);
        let log = &mut parts[partition as usize];
        let offset = log.len() as u64;
        log.push(Message {
            partition,
            offset,
            key: key.to_vec(),
            payload: payload.to_vec(),
        });
        Ok((partition, offset))
    }

    pub fn create_group(&mut self, group: &str, topic: &str, mode: DeliveryMode) -> Result<(), BrokerError> {
        let n = self.topic(topic)?.len();
        if self.groups.contains_key(group) {
            return Err(BrokerError::DuplicateGroup(group.into()));
        }
        self.groups.insert(
            group.into(),
            Group {
                topic: topic.into(),
                mode,
                members: BTreeSet::new(),
                assignment: BTreeMap::new(),
                committed: vec![0; n],
                position: vec![0; n],
                handlers: BTreeMap::new(),
            },
        );
        Ok(())
    }

    fn group_mut(&mut self, group: &str) -> Result<&mut Group, BrokerError> {
        self.groups
            .get_mut(group)
            .ok_or_else(|| BrokerError::UnknownGroup(group.into()))
    }

    fn group(&self, group: &str) -> Result<&Group, BrokerError> {
        self.groups
            .get(group)
            .ok_or_else(|| BrokerError::UnknownGroup(group.into()))
    }

    pub fn join_group(&mut self, group: &str, member: &str) -> Result<(), BrokerError> {
        let g = self.group_mut(group)?;
        if g.members.insert(member.into()) {
            g.rebalance();
        }
        Ok(())
    }

    pub fn leave_group(&mut self, group: &str, member: &str) -> Result<(), BrokerError> {
        let g = self.group_mut(group)?;
        if !g.members.remove(member) {
            return Err(BrokerError::UnknownMember {
                group: group.into(),
                member: member.into(),
            });
        }
        g.handlers.remove(member);
        g.rebalance();
        Ok(())
    }

    /// A member crashed and came back: everything it had read but not
    /// committed will be delivered again.
    pub fn restart_member(&mut self, group: &str, member: &str) -> Result<(), BrokerError> {
        let g = self.group_mut(group)?;
        if !g.members.contains(member) {
            return Err(BrokerError::UnknownMember {
                group: group.into(),
                member: member.into(),
            });
        }
        for p in g.partitions_of(member) {
            g.position[p as usize] = g.committed[p as usize];
        }
        Ok(())
    }

    /// A member crashed for good; its partitions move to the survivors.
    pub fn fail_member(&mut self, group: &str, member: &str) -> Result<(), BrokerError> {
        self.leave_group(group, member)
    }

    pub fn assignment(&self, group: &str) -> Result<BTreeMap<u32, String>, BrokerError> {
        Ok(self.group(group)?.assignment.clone())
    }

    pub fn committed(&self, group: &str, partition: u32) -> Result<u64, BrokerError> {
        self.group(group)?
            .committed
            .get(partition as usize)
            .copied()
            .ok_or(BrokerError::UnknownPartition(partition))
    }

    /// Messages published but not yet committed by the group.
    pub fn lag(&self, group: &str) -> Result<u64, BrokerError> {
        let g = self.group(group)?;
        let logs = self.topic(&g.topic)?;
        Ok(logs
            .iter()
            .zip(&g.committed)
            .map(|(l, c)| l.len() as u64 - c)
            .sum())
    }

    /// Up to `max` messages for `member`, partition by partition, starting
    /// after what it has already read.
    pub fn pull(&mut self, group: &str, member: &str, max: usize) -> Result<Vec<Message>, BrokerError> {
        let Self { topics, groups, .. } = self;
        let g = groups
            .get_mut(group)
            .ok_or_else(|| BrokerError::UnknownGroup(group.into()))?;
        if g.mode != DeliveryMode::Pull {
            return Err(BrokerError::WrongMode {
                group: group.into(),
                mode: g.mode,
            });
        }
        if !g.members.contains(member) {
            return Err(BrokerError::UnknownMember {
                group: group.into(),
                member: member.into(),
            });
        }
        let logs = &topics[&g.topic];
        let mut out = Vec::new();
        for p in g.partitions_of(member) {
            let log = &logs[p as usize];
            let pos = &mut g.position[p as usize];
            while out.len() < max && (*pos as usize) < log.len() {
                out.push(log[*pos as usize].clone());
                *pos += 1;
            }
        }
        Ok(out)
    }

    /// Records `next_offset` as the first message not yet processed.
    pub fn commit(&mut self, group: &str, partition: u32, next_offset: u64) -> Result<(), BrokerError> {
        let Self { topics, groups, .. } = self;
        let g = groups
            .get_mut(group)
            .ok_or_else(|| BrokerError::UnknownGroup(group.into()))?;
        let len = topics[&g.topic]
            .get(partition as usize)
            .ok_or(BrokerError::UnknownPartition(partition))?
            .len() as u64;
        if next_offset > len {
            return Err(BrokerError::OffsetOutOfRange {
                partition,
                offset: next_offset,
            });
        }
        let c = &mut g.committed[partition as usize];
        *c = (*c).max(next_offset);
        let pos = &mut g.position[partition as usize];
        *pos = (*pos).max(*c);
        Ok(())
    }

    /// Registers `member` in a push group with its handler.
    pub fn subscribe_push(
        &mut self,
        group: &str,
        member: &str,
        handler: impl FnMut(&Message) -> Result<(), HandlerFailure> + Send + 'static,
    ) -> Result<(), BrokerError> {
        let g = self.group_mut(group)?;
        if g.mode != DeliveryMode::Push {
            return Err(BrokerError::WrongMode {
                group: group.into(),
                mode: g.mode,
            });
        }
        g.handlers.insert(member.into(), Box::new(handler));
        if g.members.insert(member.into()) {
            g.rebalance();
        }
        Ok(())
    }

    /// Appends queued publications, then runs push delivery. A handler
    /// failure stops its partition until the next tick.
    pub fn tick(&mut self) -> TickReport {
        let mut report = TickReport::default();
        while let Ok((topic, key, payload)) = self.rx.try_recv() {
            match self.publish(&topic, &key, &payload) {
                Ok(_) => report.appended += 1,
                Err(_) => report.rejected += 1,
            }
        }
        let Self { topics, groups, .. } = self;
        for g in groups.values_mut().filter(|g| g.mode == DeliveryMode::Push) {
            let logs = &topics[&g.topic];
            for (p, member) in &g.assignment {
                let Some(handler) = g.handlers.get_mut(member) else {
                    continue;
                };
                let log = &logs[*p as usize];
                let pos = &mut g.position[*p as usize];
                while (*pos as usize) < log.len() {
                    match handler(&log[*pos as usize]) {
                        Ok(()) => {
                            *pos += 1;
                            g.committed[*p as usize] = *pos;
                            report.delivered += 1;
                        }
                        Err(_) => {
                            report.failures += 1;
                            break;
                        }
                    }
                }
            }
        }
        report
    }
}
