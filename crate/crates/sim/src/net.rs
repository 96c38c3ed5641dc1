//! Messages and the deterministic event queue.

use std::collections::BTreeMap;

use homechain_core::storage::{GuardOutcome, Retrieved};
use homechain_core::{
    AccountId, Block, BlockNumber, ClusterId, DataHash, DeviceId, NodeId, PublicKey, RandomId,
    StorageError, StoreReceipt, Transaction,
};

/// What an access or monitor response carries back to the requester.
#[derive(Debug, Clone)]
pub enum Payload {
    /// Request denied by policy.
    Denied,
    /// Sealed `block_number || data_hash || account`.
    Handle(Vec<u8>),
    /// Sealed, transformed data.
    Data(Vec<u8>),
    Error(String),
}

#[derive(Debug, Clone)]
pub enum Msg {
    Multisig {
        tx: Transaction,
    },
    Block {
        block: Block,
        relay: Option<PublicKey>,
    },
    SignedHash {
        tx: Transaction,
    },
    Alarm {
        block: Block,
        accuser: PublicKey,
    },
    ProofStore {
        tx: Transaction,
    },
    BreachReport {
        report: Transaction,
        evidence: Vec<Transaction>,
    },
    DeviceData {
        device: DeviceId,
        data: Vec<u8>,
    },
    StoreRequest {
        account: AccountId,
        prev: (BlockNumber, DataHash),
        data: Vec<u8>,
        claimed: Option<DataHash>,
        random_id: Option<RandomId>,
    },
    StoreReply {
        result: Result<StoreReceipt, StorageError>,
    },
    Ack {
        accepted: bool,
    },
    AccessResponse {
        tx: Transaction,
        payload: Payload,
    },
    Retrieve {
        account: AccountId,
        handle: (BlockNumber, DataHash),
        window: usize,
    },
    RetrieveReply {
        result: Result<Vec<Retrieved>, StorageError>,
        receipt: Option<Transaction>,
    },
    Guard {
        account: AccountId,
        handle: (BlockNumber, DataHash),
    },
    GuardReply {
        result: Result<GuardOutcome, StorageError>,
    },
    MonitorPull {
        device: DeviceId,
        readings: u64,
    },
    Reading {
        device: DeviceId,
        data: Vec<u8>,
    },
    MonitorData {
        sealed: Vec<u8>,
    },
    JoinRequest,
    BlockDownload {
        block: Block,
    },
    Notice {
        cluster: ClusterId,
        ch: NodeId,
    },
    BreachNotice {
        storage: PublicKey,
    },
    CosignReply {
        block: Block,
    },
    DeviceMessage {
        sealed: Vec<u8>,
    },
    GroupStore {
        home: String,
        handle: (BlockNumber, DataHash),
    },
}

impl Msg {
    /// Wire tag. Overlay messages use the low range.
    pub fn tag(&self) -> u8 {
        match self {
            Msg::Multisig { .. } => 0x01,
            Msg::Block { .. } => 0x02,
            Msg::SignedHash { .. } => 0x03,
            Msg::Alarm { .. } => 0x04,
            Msg::ProofStore { .. } => 0x05,
            Msg::BreachReport { .. } => 0x06,
            Msg::DeviceData { .. } => 0x10,
            Msg::StoreRequest { .. } => 0x11,
            Msg::StoreReply { .. } => 0x12,
            Msg::Ack { .. } => 0x13,
            Msg::AccessResponse { .. } => 0x14,
            Msg::Retrieve { .. } => 0x15,
            Msg::RetrieveReply { .. } => 0x16,
            Msg::Guard { .. } => 0x17,
            Msg::GuardReply { .. } => 0x18,
            Msg::MonitorPull { .. } => 0x19,
            Msg::Reading { .. } => 0x1a,
            Msg::MonitorData { .. } => 0x1b,
            Msg::JoinRequest => 0x1c,
            Msg::BlockDownload { .. } => 0x1d,
            Msg::Notice { .. } => 0x1e,
            Msg::BreachNotice { .. } => 0x1f,
            Msg::CosignReply { .. } => 0x20,
            Msg::DeviceMessage { .. } => 0x21,
            Msg::GroupStore { .. } => 0x22,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Msg::Multisig { .. } => "multisig",
            Msg::Block { .. } => "block",
            Msg::SignedHash { .. } => "signed_hash",
            Msg::Alarm { .. } => "alarm",
            Msg::ProofStore { .. } => "proof_store",
            Msg::BreachReport { .. } => "breach_report",
            Msg::DeviceData { .. } => "device_data",
            Msg::StoreRequest { .. } => "store_request",
            Msg::StoreReply { .. } => "store_reply",
            Msg::Ack { .. } => "ack",
            Msg::AccessResponse { .. } => "access_response",
            Msg::Retrieve { .. } => "retrieve",
            Msg::RetrieveReply { .. } => "retrieve_reply",
            Msg::Guard { .. } => "guard",
            Msg::GuardReply { .. } => "guard_reply",
            Msg::MonitorPull { .. } => "monitor_pull",
            Msg::Reading { .. } => "reading",
            Msg::MonitorData { .. } => "monitor_data",
            Msg::JoinRequest => "join_request",
            Msg::BlockDownload { .. } => "block_download",
            Msg::Notice { .. } => "notice",
            Msg::BreachNotice { .. } => "breach_notice",
            Msg::CosignReply { .. } => "cosign_reply",
            Msg::DeviceMessage { .. } => "device_message",
            Msg::GroupStore { .. } => "group_store",
        }
    }

    pub fn is_overlay(&self) -> bool {
        self.tag() < 0x10
    }
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub flow: u32,
    pub from: NodeId,
    pub to: NodeId,
    pub links: u32,
    pub sent: u64,
    pub msg: Msg,
}

/// Local wake-ups that carry no packet.
#[derive(Debug, Clone)]
pub enum Timer {
    AckTimeout { flow: u32, attempt: u32 },
    Reading { flow: u32, left: u64 },
    JoinDone { flow: u32 },
}

#[derive(Debug, Clone)]
pub enum Event {
    Deliver(Box<Envelope>),
    Timer(Timer),
    Workload { index: usize, rep: u32 },
    Adversary { index: usize, rep: u32 },
    Policy { index: usize },
}

/// Events ordered by (tick, insertion order).
#[derive(Debug, Default)]
pub struct EventQueue {
    events: BTreeMap<(u64, u64), Event>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, tick: u64, ev: Event) {
        self.events.insert((tick, self.seq), ev);
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(u64, Event)> {
        self.events.pop_first().map(|((t, _), e)| (t, e))
    }

    pub fn peek_tick(&self) -> Option<u64> {
        self.events.keys().next().map(|(t, _)| *t)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_tick_events_keep_insertion_order() {
        let mut q = EventQueue::default();
        q.push(5, Event::Policy { index: 1 });
        q.push(3, Event::Policy { index: 2 });
        q.push(5, Event::Policy { index: 3 });
        let order: Vec<usize> = std::iter::from_fn(|| q.pop())
            .map(|(_, e)| match e {
                Event::Policy { index } => index,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![2, 1, 3]);
    }
}
