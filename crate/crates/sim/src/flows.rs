//! Message handlers for every flow.

use std::collections::BTreeSet;

use homechain_core::crypto::{decrypt_token, derive_shared_key, encrypt_token};
use homechain_core::overlay::{AlarmOutcome, DropReason};
use homechain_core::storage::GuardOutcome;
use homechain_core::{
    hash_bytes, validate_tx_signatures, AccessScope, AccountId, Action, Block, BlockHeader,
    BlockNumber, BreachVerdict, ClusterId, DataHash, Decision, DeviceId, MemberRole, NodeId,
    PrivacyLevel, PublicKey, RouteDecision, SharedKey, SignedHashContext, StorageKind,
    StoreRequest, Transaction, TxKind, Verdict,
};
use rand::Rng;

use crate::metrics::{FlowKind, FlowOutcome};
use crate::net::{Envelope, Msg, Payload, Timer};
use crate::scenario::{AdversarySpec, JoinSource, WorkloadSpec};
use crate::transform;
use crate::world::{ClusterMove, Ctx, Election, Leak, NodeKind, World};

fn handle_bytes(handle: &(BlockNumber, DataHash), account: AccountId) -> Vec<u8> {
    let mut v = handle.0 .0.to_vec();
    v.extend_from_slice(&handle.1 .0);
    v.extend_from_slice(&account.0.to_be_bytes());
    v
}

fn parse_handle(bytes: &[u8]) -> Option<((BlockNumber, DataHash), AccountId)> {
    if bytes.len() != 56 {
        return None;
    }
    let bn = BlockNumber(bytes[..16].try_into().ok()?);
    let hash = DataHash(bytes[16..48].try_into().ok()?);
    let account = AccountId(u64::from_be_bytes(bytes[48..].try_into().ok()?));
    Some(((bn, hash), account))
}

fn block_number(bytes: &[u8]) -> Option<BlockNumber> {
    Some(BlockNumber(bytes.try_into().ok()?))
}

impl World {
    fn miner_storage_key(&self, hi: usize, si: usize) -> SharedKey {
        derive_shared_key(
            self.provider.as_ref(),
            self.homes[hi].miner.private_key(),
            self.storages[si].store.public_key(),
        )
        .expect("keys share a scheme")
    }

    fn peer_pk(&self, node: NodeId) -> Option<PublicKey> {
        match self.node_kind(node) {
            NodeKind::Miner(h) => Some(self.homes[h].miner.public_key().clone()),
            NodeKind::Requester(r) => Some(self.requesters[r].key.public.clone()),
            _ => None,
        }
    }

    fn device_node(&mut self, hi: usize, device: &DeviceId) -> NodeId {
        if let Some(n) = self.homes[hi].device_nodes.get(device) {
            return *n;
        }
        let n = self.add_runtime_node(
            format!("{}/{}", self.homes[hi].name, device),
            NodeKind::Device(hi),
        );
        self.homes[hi].device_nodes.insert(device.clone(), n);
        n
    }

    fn ch_members(&self, cluster: ClusterId, role: MemberRole) -> Vec<NodeId> {
        self.overlay
            .cluster(cluster)
            .map(|c| {
                c.members()
                    .filter(|m| m.role == role)
                    .map(|m| m.node)
                    .collect()
            })
            .unwrap_or_default()
    }

    // ---- scheduling ----

    pub(crate) fn start_workload(&mut self, index: usize, rep: u32) {
        let w = self.scenario.workload[index].clone();
        match w {
            WorkloadSpec::Store {
                home,
                device,
                target,
                data,
                ..
            } => {
                let hi = self.home_index(&home).expect("validated home");
                let bytes = data
                    .map(|d| format!("{d}#{rep}"))
                    .unwrap_or_else(|| format!("{home}/{device}/{}/{rep}", self.now))
                    .into_bytes();
                self.start_store(hi, DeviceId::new(device), target, bytes);
            }
            WorkloadSpec::Access {
                requester,
                home,
                device,
                scope,
                target,
                ..
            } => {
                let ri = self
                    .requester_index(&requester)
                    .expect("validated requester");
                let key = self.requesters[ri].key.clone();
                let hi = self.home_index(&home).expect("validated home");
                self.start_access(
                    ri,
                    key,
                    hi,
                    DeviceId::new(device),
                    Some(scope),
                    target,
                    0,
                    false,
                );
            }
            WorkloadSpec::Monitor {
                requester,
                home,
                device,
                continuous,
                ..
            } => {
                let ri = self
                    .requester_index(&requester)
                    .expect("validated requester");
                let key = self.requesters[ri].key.clone();
                let hi = self.home_index(&home).expect("validated home");
                self.start_access(
                    ri,
                    key,
                    hi,
                    DeviceId::new(device),
                    None,
                    None,
                    continuous + 1,
                    false,
                );
            }
            WorkloadSpec::BreachCheck { home, device, .. } => {
                let hi = self.home_index(&home).expect("validated home");
                self.start_breach_check(hi, DeviceId::new(device));
            }
            WorkloadSpec::Mine { cluster, txs, .. } => {
                let c = self.cluster(cluster);
                let batch = self.synthetic_signed_hashes(c, txs, 0);
                self.start_mining(c, batch, BTreeSet::new());
            }
            WorkloadSpec::Join {
                home,
                blocks,
                txs_per_block,
                source,
                ..
            } => {
                let hi = self.home_index(&home).expect("validated home");
                self.start_join(hi, blocks, txs_per_block, source);
            }
            WorkloadSpec::DeviceMessage { home, from, to, .. } => {
                let hi = self.home_index(&home).expect("validated home");
                self.start_device_message(hi, DeviceId::new(from), DeviceId::new(to));
            }
        }
    }

    pub(crate) fn start_adversary(&mut self, index: usize, rep: u32) {
        let a = self.scenario.adversary[index].clone();
        match a {
            AdversarySpec::DosFlood {
                requester,
                home,
                device,
                rotate_pk,
                ..
            } => {
                let ri = self
                    .requester_index(&requester)
                    .expect("validated requester");
                let key = if rotate_pk {
                    self.keypair(&format!("{requester}-{rep}"))
                } else {
                    self.requesters[ri].key.clone()
                };
                let hi = self.home_index(&home).expect("validated home");
                self.start_access(
                    ri,
                    key,
                    hi,
                    DeviceId::new(device),
                    Some(AccessScope::FullChain),
                    None,
                    0,
                    true,
                );
            }
            AdversarySpec::Modification {
                storage,
                home,
                device,
                ..
            } => {
                let si = self.storage_index(&storage).expect("validated storage");
                let hi = self.home_index(&home).expect("validated home");
                let d = DeviceId::new(device);
                let h = &self.homes[hi];
                let Some((kind, _)) = h.storages.iter().find(|(_, s)| **s == si) else {
                    self.bump("modification_skipped");
                    return;
                };
                let Some(acct) = h.accounts.get(&(*kind, h.account_key(&d))).copied() else {
                    self.bump("modification_skipped");
                    return;
                };
                let st = &mut self.storages[si];
                st.store
                    .mutate_for_attack(acct.id, &acct.tip.0, b"tampered".to_vec());
                st.tampered.insert((acct.id, acct.tip.0));
                self.bump("modifications");
            }
            AdversarySpec::DroppingCh { cluster, .. } => {
                let c = self.cluster(cluster);
                if let Some(ch) = self.overlay.ch_of(c) {
                    self.dropping.insert(ch, self.now);
                }
            }
            AdversarySpec::MiningCollusion {
                miner_cluster,
                txs,
                bad,
                prior_pos,
                prior_neg,
                fresh_cluster,
                ..
            } => {
                let c = self.cluster(miner_cluster);
                let Some(cos) = self.overlay.successor(c) else {
                    self.bump("collusion_skipped");
                    return;
                };
                let fresh = fresh_cluster.map(|f| self.cluster(f));
                let pks: Vec<PublicKey> = [c, cos]
                    .iter()
                    .filter_map(|x| self.overlay.head(*x).map(|h| h.public_key().clone()))
                    .collect();
                for k in 0..self.overlay.len() as u32 {
                    let cid = ClusterId(k);
                    if cid == c || cid == cos || Some(cid) == fresh {
                        continue;
                    }
                    if let Some(h) = self.overlay.head_mut(cid) {
                        for pk in &pks {
                            for _ in 0..prior_pos {
                                h.trust.update_evidence(
                                    pk,
                                    homechain_core::Outcome::Pos,
                                    homechain_core::Channel::Direct,
                                );
                            }
                            for _ in 0..prior_neg {
                                h.trust.update_evidence(
                                    pk,
                                    homechain_core::Outcome::Neg,
                                    homechain_core::Channel::Direct,
                                );
                            }
                        }
                    }
                }
                let batch = self.synthetic_signed_hashes(c, txs, bad);
                self.start_mining(c, batch, BTreeSet::from([c, cos]));
            }
            AdversarySpec::FakeSpChain {
                requester,
                home,
                device,
                ..
            } => {
                let ri = self
                    .requester_index(&requester)
                    .expect("validated requester");
                let hi = self.home_index(&home).expect("validated home");
                self.start_fake_chain(ri, hi, DeviceId::new(device));
            }
            AdversarySpec::RogueDevice { home, device, .. } => {
                let hi = self.home_index(&home).expect("validated home");
                let data = format!("rogue/{device}/{}", self.now).into_bytes();
                self.start_store(hi, DeviceId::new(device), StorageKind::Local, data);
            }
        }
    }

    pub(crate) fn on_timer(&mut self, t: Timer) {
        match t {
            Timer::AckTimeout { flow, attempt } => self.on_ack_timeout(flow, attempt),
            Timer::Reading { flow, left } => {
                let Some(Ctx::Access { home, device, .. }) = self.ctx.get(&flow).cloned() else {
                    return;
                };
                let dn = self.device_node(home, &device);
                let miner = self.homes[home].node;
                let data = format!("{device}:reading:{}", self.now).into_bytes();
                self.send(flow, dn, miner, Msg::Reading { device, data });
                if left > 1 {
                    self.timer(
                        self.now + 1,
                        Timer::Reading {
                            flow,
                            left: left - 1,
                        },
                    );
                }
            }
            Timer::JoinDone { flow } => {
                self.set_outcome(flow, FlowOutcome::Ok);
                self.snapshot_memory(flow);
            }
        }
    }

    pub(crate) fn dispatch(&mut self, env: Envelope) {
        let Envelope {
            flow,
            from,
            to,
            links,
            sent,
            msg,
        } = env;
        match msg {
            Msg::DeviceData { device, .. } => self.on_device_data(flow, to, device),
            Msg::StoreRequest {
                account,
                prev,
                data,
                claimed,
                random_id,
            } => self.on_store_request(flow, from, to, account, prev, data, claimed, random_id),
            Msg::StoreReply { result } => self.on_store_reply(flow, to, result),
            Msg::SignedHash { tx } => self.on_signed_hash(to, tx),
            Msg::GroupStore { home, handle } => self.on_group_store(to, home, handle),
            Msg::Multisig { tx } => match self.node_kind(to) {
                NodeKind::Miner(hi) => self.on_home_multisig(flow, hi, tx, sent, links),
                _ => self.on_ch_multisig(flow, from, to, tx),
            },
            Msg::Ack { .. } => {
                if let Some(Ctx::Access { acked, .. }) = self.ctx.get_mut(&flow) {
                    *acked = true;
                }
            }
            Msg::ProofStore { tx } => {
                if let Some(c) = self.overlay.cluster_headed_by(to) {
                    if let Some(h) = self.overlay.head_mut(c) {
                        h.accept_for_mining(tx);
                    }
                }
                self.bump("proofs_stored");
            }
            Msg::Guard { account, handle } => {
                let NodeKind::Storage(si) = self.node_kind(to) else {
                    return;
                };
                let Some(pk) = self.peer_pk(from) else { return };
                let key =
                    derive_shared_key(self.provider.as_ref(), &self.storages[si].key.private, &pk)
                        .expect("keys share a scheme");
                let result = self.storages[si].store.pre_chain_guard(
                    account,
                    &handle.0,
                    &handle.1,
                    &key,
                    &mut self.rng,
                );
                self.send(flow, to, from, Msg::GuardReply { result });
            }
            Msg::GuardReply { result } => self.on_guard_reply(flow, to, result),
            Msg::Retrieve {
                account,
                handle,
                window,
            } => {
                let NodeKind::Storage(si) = self.node_kind(to) else {
                    return;
                };
                let st = &self.storages[si];
                let result = st
                    .store
                    .retrieve_window(account, &handle.0, &handle.1, window);
                let receipt = match (&result, st.store.kind()) {
                    (Ok(blocks), StorageKind::Cloud) if !blocks.is_empty() => {
                        Some(st.store.issue_receipt(account, &blocks[0], self.now))
                    }
                    _ => None,
                };
                self.send(flow, to, from, Msg::RetrieveReply { result, receipt });
            }
            Msg::RetrieveReply { result, receipt } => {
                self.on_retrieve_reply(flow, to, result, receipt)
            }
            Msg::AccessResponse { tx, payload } => match self.node_kind(to) {
                NodeKind::Requester(_) => self.on_requester_response(flow, tx, payload),
                _ => {
                    if let Some(c) = self.overlay.cluster_headed_by(to) {
                        if !matches!(payload, Payload::Error(_)) && tx.output_bit.is_some() {
                            if let Some(h) = self.overlay.head_mut(c) {
                                if h.note_resolution(&tx, self.now) {
                                    self.bump("pks_blocked");
                                }
                            }
                        }
                    }
                    let id = tx.id();
                    self.route_back_to(flow, to, id, Msg::AccessResponse { tx, payload });
                }
            },
            Msg::MonitorPull { device, readings } => {
                let NodeKind::Device(hi) = self.node_kind(to) else {
                    return;
                };
                let data = format!("{device}:reading:{}", self.now).into_bytes();
                let miner = self.homes[hi].node;
                self.send(flow, to, miner, Msg::Reading { device, data });
                if readings > 1 {
                    self.timer(
                        self.now + 1,
                        Timer::Reading {
                            flow,
                            left: readings - 1,
                        },
                    );
                }
            }
            Msg::Reading { data, .. } => self.on_reading(flow, to, data),
            Msg::MonitorData { sealed } => match self.node_kind(to) {
                NodeKind::Requester(_) => {
                    if let Some(Ctx::Access { received, .. }) = self.ctx.get_mut(&flow) {
                        *received += 1;
                        let n = *received;
                        self.comp(flow, 1);
                        self.set_detail(flow, format!("readings:{n}"));
                    }
                }
                _ => {
                    let Some(Ctx::Access { tx, .. }) = self.ctx.get(&flow) else {
                        return;
                    };
                    let id = tx.id();
                    self.route_back_to(flow, to, id, Msg::MonitorData { sealed });
                }
            },
            Msg::Block { block, relay } => self.on_block(flow, to, block, relay),
            Msg::CosignReply { block } => {
                let Some(c) = self.overlay.cluster_headed_by(to) else {
                    return;
                };
                let Some(h) = self.overlay.head_mut(c) else {
                    return;
                };
                if !h.is_discarded(&block.id()) {
                    h.keep_own_block(block);
                }
                if self.flows[flow as usize].outcome.is_none() {
                    self.set_outcome(flow, FlowOutcome::Ok);
                }
            }
            Msg::Alarm { block, accuser } => {
                let Some(c) = self.overlay.cluster_headed_by(to) else {
                    return;
                };
                let sigs = block.txs.iter().map(|t| t.slots.len()).sum::<usize>() + 2;
                self.comp(flow, sigs as u64);
                let provider = self.provider.clone();
                let Some(h) = self.overlay.head_mut(c) else {
                    return;
                };
                match h.receive_alarm(provider.as_ref(), &block, &accuser) {
                    AlarmOutcome::Confirmed => self.bump("alarms_confirmed"),
                    AlarmOutcome::FalseAlarm => self.bump("false_alarms"),
                    AlarmOutcome::Duplicate => {}
                }
            }
            Msg::BreachReport { report, evidence } => {
                let Some(c) = self.overlay.cluster_headed_by(to) else {
                    return;
                };
                let provider = self.provider.clone();
                self.comp(flow, 3);
                let Some(h) = self.overlay.head_mut(c) else {
                    return;
                };
                let verdict = h.validate_breach(provider.as_ref(), &report, &evidence);
                match verdict {
                    BreachVerdict::Flagged(pk) => {
                        self.bump("breach_flagged");
                        if let Some(Ctx::Breach { flagged, .. }) = self.ctx.get_mut(&flow) {
                            *flagged += 1;
                        }
                        for m in self.overlay.broadcast_targets(c) {
                            self.send(
                                flow,
                                to,
                                m,
                                Msg::BreachNotice {
                                    storage: pk.clone(),
                                },
                            );
                        }
                    }
                    BreachVerdict::Rejected(_) => self.bump("breach_rejected"),
                    BreachVerdict::Unverifiable => {
                        self.bump("breach_unverifiable");
                        if let Some(Ctx::Breach { unverifiable, .. }) = self.ctx.get_mut(&flow) {
                            *unverifiable += 1;
                        }
                    }
                }
            }
            Msg::BreachNotice { .. } | Msg::Notice { .. } => {}
            Msg::JoinRequest => self.on_join_request(flow, to, from),
            Msg::BlockDownload { block } => self.on_block_download(flow, block),
            Msg::DeviceMessage { sealed } => {
                if let Some(Ctx::DeviceMessage { home }) = self.ctx.get(&flow).cloned() {
                    let _ = (home, sealed);
                    self.comp(flow, 1);
                    self.set_outcome(flow, FlowOutcome::Ok);
                }
            }
        }
    }

    fn route_back_to(&mut self, flow: u32, at: NodeId, id: homechain_core::TxId, msg: Msg) {
        match self.route_back.get(&(at, id)).copied() {
            Some(prev) => self.send(flow, at, prev, msg),
            None => {
                let Some(Ctx::Access { requester, .. }) = self.ctx.get(&flow) else {
                    return;
                };
                let node = self.requesters[*requester].node;
                self.send(flow, at, node, msg);
            }
        }
    }

    // ---- store ----

    pub(crate) fn start_store(
        &mut self,
        hi: usize,
        device: DeviceId,
        target: StorageKind,
        data: Vec<u8>,
    ) -> u32 {
        let kind = match target {
            StorageKind::Local => FlowKind::StoreLocal,
            StorageKind::Shared if self.homes[hi].group.is_some() => FlowKind::StoreOverlay,
            StorageKind::Shared => FlowKind::StoreShared,
            StorageKind::Cloud => FlowKind::StoreCloud,
        };
        let flow = self.new_flow(
            kind,
            false,
            Ctx::Store {
                home: hi,
                device: device.clone(),
                target,
                data: data.clone(),
            },
        );
        let dn = self.device_node(hi, &device);
        let miner = self.homes[hi].node;
        self.send(flow, dn, miner, Msg::DeviceData { device, data });
        flow
    }

    fn on_device_data(&mut self, flow: u32, to: NodeId, device: DeviceId) {
        let NodeKind::Miner(hi) = self.node_kind(to) else {
            return;
        };
        let Some(Ctx::Store { target, .. }) = self.ctx.get(&flow).cloned() else {
            return;
        };
        self.comp(flow, 1);
        let now = self.now;
        let h = &mut self.homes[hi];
        h.miner.set_time(now);
        if let Err(e) = h.miner.check_device_action(&device, Action::store(target)) {
            self.bump("store_rejected");
            self.set_outcome(flow, FlowOutcome::Rejected(e.code().to_string()));
            return;
        }
        if !h.storages.contains_key(&target) {
            self.set_outcome(flow, FlowOutcome::Rejected("no-storage".into()));
            return;
        }
        let q = h
            .store_queue
            .entry((target, h.account_key(&device)))
            .or_default();
        q.push_back(flow);
        if q.len() == 1 {
            self.send_store_request(flow, hi);
        }
    }

    /// Send the storage request of a queued store flow, chained on the account tip.
    fn send_store_request(&mut self, flow: u32, hi: usize) {
        let Some(Ctx::Store {
            device,
            target,
            data,
            ..
        }) = self.ctx.get(&flow).cloned()
        else {
            return;
        };
        let h = &self.homes[hi];
        let si = h.storages[&target];
        let acct = h.accounts[&(target, h.account_key(&device))];
        let claimed = (target != StorageKind::Shared).then(|| hash_bytes(&data));
        let (from, node) = (h.node, self.storages[si].node);
        let random_id =
            (target != StorageKind::Local).then(|| self.registry.allocate(&mut self.rng));
        if claimed.is_some() {
            self.comp(flow, 1);
        }
        self.send(
            flow,
            from,
            node,
            Msg::StoreRequest {
                account: acct.id,
                prev: acct.tip,
                data,
                claimed,
                random_id,
            },
        );
    }

    /// Release the account a store flow held and start the next one waiting.
    fn next_store(&mut self, hi: usize, target: StorageKind, device: &DeviceId) {
        let key = (target, self.homes[hi].account_key(device));
        let next = self.homes[hi].store_queue.get_mut(&key).and_then(|q| {
            q.pop_front();
            q.front().copied()
        });
        if let Some(f) = next {
            self.send_store_request(f, hi);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_store_request(
        &mut self,
        flow: u32,
        from: NodeId,
        to: NodeId,
        account: AccountId,
        prev: (BlockNumber, DataHash),
        data: Vec<u8>,
        claimed: Option<DataHash>,
        random_id: Option<homechain_core::RandomId>,
    ) {
        let NodeKind::Storage(si) = self.node_kind(to) else {
            return;
        };
        let Some(pk) = self.peer_pk(from) else { return };
        let key = derive_shared_key(self.provider.as_ref(), &self.storages[si].key.private, &pk)
            .expect("keys share a scheme");
        let now = self.now;
        let result = self.storages[si].store.store(
            StoreRequest {
                requester: random_id,
                account,
                prev_block_number: prev.0,
                prev_hash: prev.1,
                data: &data,
                claimed_hash: claimed,
            },
            &key,
            now,
            &mut self.rng,
        );
        if let Some(id) = random_id {
            self.registry.release(id);
        }
        self.comp(flow, 2);
        if let Some(Ctx::FakeChain { .. }) = self.ctx.get(&flow) {
            match &result {
                Ok(_) => {
                    self.bump("fake_chain_accepted");
                    self.set_outcome(flow, FlowOutcome::Ok);
                }
                Err(e) => {
                    self.bump("fake_chain_rejected");
                    self.set_outcome(flow, FlowOutcome::Rejected(e.code().to_string()));
                }
            }
            return;
        }
        if let Ok(r) = &result {
            if let (Some(tx), Some(cid)) = (&r.signed_hash, self.storages[si].cluster) {
                if let Some(ch) = self.overlay.ch_of(cid) {
                    self.send(flow, to, ch, Msg::SignedHash { tx: tx.clone() });
                }
            }
        }
        self.send(flow, to, from, Msg::StoreReply { result });
    }

    fn on_store_reply(
        &mut self,
        flow: u32,
        to: NodeId,
        result: Result<homechain_core::StoreReceipt, homechain_core::StorageError>,
    ) {
        let NodeKind::Miner(hi) = self.node_kind(to) else {
            return;
        };
        let Some(Ctx::Store { device, target, .. }) = self.ctx.get(&flow).cloned() else {
            return;
        };
        let r = match result {
            Ok(r) => r,
            Err(e) => {
                self.next_store(hi, target, &device);
                self.set_outcome(flow, FlowOutcome::Rejected(e.code().to_string()));
                return;
            }
        };
        let si = self.homes[hi].storages[&target];
        let key = self.miner_storage_key(hi, si);
        let Some(bn) = decrypt_token(self.provider.as_ref(), &key, &r.encrypted_block_number)
            .ok()
            .and_then(|b| block_number(&b))
        else {
            self.next_store(hi, target, &device);
            self.set_outcome(flow, FlowOutcome::Rejected("bad-block-number".into()));
            return;
        };
        self.comp(flow, 2);
        let now = self.now;
        let h = &mut self.homes[hi];
        h.miner.set_time(now);
        let acct_key = (target, h.account_key(&device));
        if let Some(a) = h.accounts.get_mut(&acct_key) {
            a.tip = (bn, r.data_hash);
        }
        self.next_store(hi, target, &device);
        let h = &mut self.homes[hi];
        let tx = h.miner.store_tx(&device, target, bn, r.data_hash);
        if let Err(e) = h.miner.append_tx(tx) {
            self.set_outcome(flow, FlowOutcome::Rejected(e.code().to_string()));
            return;
        }
        if let Some(sh) = &r.signed_hash {
            h.cloud_refs.insert(
                device.clone(),
                crate::world::CloudRef {
                    handle: (bn, r.data_hash),
                    signed_hash: sh.id(),
                },
            );
        }
        if target == StorageKind::Shared {
            if let Some(gi) = h.group {
                let name = h.name.clone();
                let gnode = self.groups[gi].node;
                self.send(
                    flow,
                    to,
                    gnode,
                    Msg::GroupStore {
                        home: name,
                        handle: (bn, r.data_hash),
                    },
                );
            }
        }
        self.set_outcome(flow, FlowOutcome::Ok);
    }

    fn on_group_store(&mut self, to: NodeId, home: String, handle: (BlockNumber, DataHash)) {
        let NodeKind::Group(gi) = self.node_kind(to) else {
            return;
        };
        let now = self.now;
        let g = &mut self.groups[gi];
        g.miner.set_time(now);
        let d = DeviceId::new(&home);
        if g.miner.check_device_action(&d, Action::StoreShared).is_ok() {
            let tx = g
                .miner
                .store_tx(&d, StorageKind::Shared, handle.0, handle.1);
            if g.miner.append_tx(tx).is_ok() {
                g.table.update(&home, handle.0, handle.1);
            }
        }
    }

    fn on_signed_hash(&mut self, to: NodeId, tx: Transaction) {
        let Some(c) = self.overlay.cluster_headed_by(to) else {
            return;
        };
        let Some(h) = self.overlay.head_mut(c) else {
            return;
        };
        h.accept_for_mining(tx);
        if self.scenario.topology.auto_mine && h.ready_to_mine() {
            self.start_pending_mining(c);
        }
    }

    // ---- access and monitor ----

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn start_access(
        &mut self,
        ri: usize,
        key: homechain_core::KeyPair,
        hi: usize,
        device: DeviceId,
        scope: Option<AccessScope>,
        target: Option<StorageKind>,
        readings: u64,
        adversarial: bool,
    ) -> u32 {
        let kind = match scope {
            Some(s) => TxKind::Access { scope: s },
            None => TxKind::Monitor,
        };
        let mut tx = Transaction::new(kind, self.now)
            .with_device(device.clone())
            .with_signer(key.public.clone())
            .with_signer(self.homes[hi].miner.public_key().clone());
        tx.sign_slot(self.provider.as_ref(), 0, &key.private)
            .expect("requester owns slot 0");
        let h = &self.homes[hi];
        let target = target.unwrap_or(if h.storages.contains_key(&StorageKind::Cloud) {
            StorageKind::Cloud
        } else {
            StorageKind::Local
        });
        let rnode = self.requesters[ri].node;
        let ingress = self
            .overlay
            .cluster_of(rnode)
            .and_then(|c| self.overlay.ch_of(c));
        let flow = self.new_flow(
            if scope.is_some() {
                FlowKind::Access
            } else {
                FlowKind::Monitor
            },
            adversarial,
            Ctx::Access {
                requester: ri,
                key,
                home: hi,
                device,
                target,
                monitor: scope.is_none(),
                readings,
                tx: tx.clone(),
                resolved: None,
                transform: None,
                ingress: ingress.unwrap_or(rnode),
                acked: false,
                attempt: 0,
                sent_at: self.now,
                received: 0,
            },
        );
        self.comp(flow, 1);
        let Some(ingress) = ingress else {
            self.set_outcome(flow, FlowOutcome::Rejected("no-ch".into()));
            return flow;
        };
        self.send(flow, rnode, ingress, Msg::Multisig { tx });
        let w = self.scenario.topology.ack_window;
        self.timer(self.now + w, Timer::AckTimeout { flow, attempt: 0 });
        flow
    }

    fn on_ack_timeout(&mut self, flow: u32, attempt: u32) {
        let Some(Ctx::Access {
            requester,
            acked,
            attempt: cur,
            ingress,
            sent_at,
            tx,
            ..
        }) = self.ctx.get(&flow).cloned()
        else {
            return;
        };
        if acked
            || cur != attempt
            || self.flows[flow as usize].adversarial
            || self.flows[flow as usize].outcome.is_some()
        {
            return;
        }
        let rnode = self.requesters[requester].node;
        let Some(cluster) = self.overlay.cluster_of(rnode) else {
            return;
        };
        match self.overlay.accuse(cluster, ingress) {
            Ok(Some(new_ch)) => {
                let ef = self.new_flow(FlowKind::Election, false, Ctx::Election { cluster });
                self.elections.push(Election {
                    cluster,
                    tick: self.now,
                    accused: ingress,
                    new_ch: Some(new_ch),
                    unanswered_since: sent_at,
                });
                for m in self.overlay.broadcast_targets(cluster) {
                    self.send(
                        ef,
                        new_ch,
                        m,
                        Msg::Notice {
                            cluster,
                            ch: new_ch,
                        },
                    );
                }
                self.set_outcome(ef, FlowOutcome::Ok);
                if let Some(Ctx::Access {
                    ingress,
                    acked,
                    attempt,
                    sent_at,
                    ..
                }) = self.ctx.get_mut(&flow)
                {
                    *ingress = new_ch;
                    *acked = false;
                    *attempt += 1;
                    *sent_at = self.now;
                }
                self.send(flow, rnode, new_ch, Msg::Multisig { tx });
                let w = self.scenario.topology.ack_window;
                self.timer(
                    self.now + w,
                    Timer::AckTimeout {
                        flow,
                        attempt: attempt + 1,
                    },
                );
            }
            Ok(None) => {}
            Err(_) => {
                let ef = self.new_flow(FlowKind::Election, false, Ctx::Election { cluster });
                self.elections.push(Election {
                    cluster,
                    tick: self.now,
                    accused: ingress,
                    new_ch: None,
                    unanswered_since: sent_at,
                });
                self.set_outcome(ef, FlowOutcome::Rejected("unrecoverable".into()));
                self.set_outcome(flow, FlowOutcome::Rejected("unrecoverable".into()));
            }
        }
    }

    fn on_ch_multisig(&mut self, flow: u32, from: NodeId, to: NodeId, tx: Transaction) {
        let Some(c) = self.overlay.cluster_headed_by(to) else {
            self.bump("stale_ch");
            return;
        };
        let from_requester = matches!(self.node_kind(from), NodeKind::Requester(_));
        let decision = match self.overlay.head_mut(c) {
            Some(h) => h.route_multisig(&tx),
            None => return,
        };
        self.comp(flow, 1);
        if from_requester && decision != RouteDecision::Dropped(DropReason::Blocked) {
            self.send(flow, to, from, Msg::Ack { accepted: true });
        }
        match decision {
            RouteDecision::Broadcast { forward } => {
                for m in self.ch_members(c, MemberRole::Home) {
                    self.send(flow, to, m, Msg::Multisig { tx: tx.clone() });
                }
                if forward {
                    self.forward_multisig(flow, c, to, tx);
                }
            }
            RouteDecision::Forward => self.forward_multisig(flow, c, to, tx),
            RouteDecision::Dropped(DropReason::Blocked) => {
                self.bump("dropped_blocked");
                self.set_outcome(flow, FlowOutcome::Rejected("blocked".into()));
            }
            RouteDecision::Dropped(DropReason::Duplicate) => {
                let ingress = matches!(self.ctx.get(&flow), Some(Ctx::Access { ingress, .. }) if *ingress == to);
                if ingress {
                    self.undeliverable(flow, to, tx);
                } else {
                    self.bump("dropped_duplicate");
                }
            }
            RouteDecision::Dropped(DropReason::Malformed) => {
                self.set_outcome(flow, FlowOutcome::Rejected("malformed".into()));
            }
        }
    }

    fn undeliverable(&mut self, flow: u32, at: NodeId, tx: Transaction) {
        let Some(Ctx::Access { requester, .. }) = self.ctx.get(&flow) else {
            return;
        };
        let node = self.requesters[*requester].node;
        self.send(
            flow,
            at,
            node,
            Msg::AccessResponse {
                tx,
                payload: Payload::Error("undeliverable".into()),
            },
        );
    }

    fn forward_multisig(&mut self, flow: u32, c: ClusterId, at: NodeId, tx: Transaction) {
        let next = self
            .overlay
            .successor(c)
            .and_then(|n| self.overlay.ch_of(n));
        match next {
            Some(n) if n != at => {
                self.route_back.insert((n, tx.id()), at);
                self.send(flow, at, n, Msg::Multisig { tx });
            }
            _ => self.undeliverable(flow, at, tx),
        }
    }

    fn maybe_change_cluster(&mut self, hi: usize, sent: u64, links: u32) {
        let t = &self.scenario.topology;
        let ticks = (self.now - sent) / t.link_delay;
        let excess = ticks.saturating_sub(links as u64);
        if excess <= t.change_threshold {
            return;
        }
        let current = self.homes[hi].cluster;
        let best = (0..t.clusters)
            .filter(|c| self.overlay.head(ClusterId(*c)).is_some())
            .min_by_key(|c| (t.delay_factor(*c), *c))
            .map(ClusterId);
        let Some(best) = best else { return };
        if best == current || t.delay_factor(best.0) >= t.delay_factor(current.0) {
            return;
        }
        if self
            .overlay
            .change_cluster(self.homes[hi].node, best)
            .is_ok()
        {
            self.homes[hi].cluster = best;
            self.moves.push(ClusterMove {
                home: hi,
                from: current,
                to: best,
                tick: self.now,
            });
        }
    }

    fn on_home_multisig(&mut self, flow: u32, hi: usize, tx: Transaction, sent: u64, links: u32) {
        if tx.requestee() != Some(self.homes[hi].miner.public_key()) {
            self.bump("broadcast_ignored");
            return;
        }
        let Some(Ctx::Access {
            target,
            monitor,
            readings,
            device,
            ..
        }) = self.ctx.get(&flow).cloned()
        else {
            return;
        };
        self.maybe_change_cluster(hi, sent, links);
        let now = self.now;
        let h = &mut self.homes[hi];
        h.miner.set_time(now);
        let resolved = h.miner.resolve_request(tx.clone());
        self.comp(flow, 2);
        let (rtx, decision) = match resolved {
            Ok(r) => r,
            Err(e) => {
                self.respond(flow, hi, tx, Payload::Error(e.code().to_string()));
                return;
            }
        };
        let h = &self.homes[hi];
        let rule = match &decision {
            Decision::Allow { rule: Some(i), .. } => h.miner.policy().rules.get(*i).cloned(),
            _ => None,
        };
        let disclose = rule.as_ref().is_none_or(|r| r.disclose_proof);
        let transform = rule.and_then(|r| r.transform.clone());
        if let Some(Ctx::Access {
            resolved,
            transform: tf,
            ..
        }) = self.ctx.get_mut(&flow)
        {
            *resolved = Some(rtx.clone());
            *tf = transform;
        }
        let home_node = self.homes[hi].node;
        for c in self.overlay.proof_targets(&mut self.rng, disclose) {
            if let Some(ch) = self.overlay.ch_of(c) {
                self.send(flow, home_node, ch, Msg::ProofStore { tx: rtx.clone() });
            }
        }
        let level = match decision {
            Decision::Deny => {
                self.respond(flow, hi, rtx, Payload::Denied);
                return;
            }
            Decision::Allow { level, .. } => level,
        };
        if monitor {
            if self.homes[hi].offline.contains(&device) {
                self.respond(flow, hi, rtx, Payload::Error("device-offline".into()));
                return;
            }
            let dn = self.device_node(hi, &device);
            self.send(flow, home_node, dn, Msg::MonitorPull { device, readings });
            return;
        }
        let h = &self.homes[hi];
        let Some(&si) = h.storages.get(&target) else {
            self.respond(flow, hi, rtx, Payload::Error("no-storage".into()));
            return;
        };
        let acct = h.accounts[&(target, h.account_key(&device))];
        let snode = self.storages[si].node;
        let msg = match level {
            PrivacyLevel::FullChain => Msg::Guard {
                account: acct.id,
                handle: acct.tip,
            },
            PrivacyLevel::Minimal => Msg::Retrieve {
                account: acct.id,
                handle: acct.tip,
                window: self.scenario.topology.window_blocks,
            },
        };
        self.send(flow, home_node, snode, msg);
    }

    fn requester_key(&self, hi: usize, flow: u32) -> Option<SharedKey> {
        let Some(Ctx::Access { key, .. }) = self.ctx.get(&flow) else {
            return None;
        };
        derive_shared_key(
            self.provider.as_ref(),
            self.homes[hi].miner.private_key(),
            &key.public,
        )
        .ok()
    }

    fn seal_for_requester(&mut self, hi: usize, flow: u32, bytes: &[u8]) -> Vec<u8> {
        self.comp(flow, 1);
        match self.requester_key(hi, flow) {
            Some(k) => encrypt_token(self.provider.as_ref(), &k, bytes, &mut self.rng),
            None => Vec::new(),
        }
    }

    fn respond(&mut self, flow: u32, hi: usize, tx: Transaction, payload: Payload) {
        let home = self.homes[hi].node;
        let Some(ch) = self.overlay.ch_of(self.homes[hi].cluster) else {
            return;
        };
        self.send(flow, home, ch, Msg::AccessResponse { tx, payload });
    }

    fn resolved_tx(&self, flow: u32) -> Option<Transaction> {
        match self.ctx.get(&flow) {
            Some(Ctx::Access { resolved, .. }) => resolved.clone(),
            _ => None,
        }
    }

    fn on_guard_reply(
        &mut self,
        flow: u32,
        to: NodeId,
        result: Result<GuardOutcome, homechain_core::StorageError>,
    ) {
        let NodeKind::Miner(hi) = self.node_kind(to) else {
            return;
        };
        let Some(Ctx::Access { device, target, .. }) = self.ctx.get(&flow).cloned() else {
            return;
        };
        let Some(rtx) = self.resolved_tx(flow) else {
            return;
        };
        let h = &self.homes[hi];
        let acct_key = (target, h.account_key(&device));
        let acct = h.accounts[&acct_key];
        match result {
            Ok(outcome) => {
                if let GuardOutcome::Guarded {
                    encrypted_block_number,
                    empty_hash,
                } = outcome
                {
                    let si = h.storages[&target];
                    let key = self.miner_storage_key(hi, si);
                    let bn = decrypt_token(self.provider.as_ref(), &key, &encrypted_block_number)
                        .ok()
                        .and_then(|b| block_number(&b));
                    self.comp(flow, 1);
                    if let Some(bn) = bn {
                        if let Some(a) = self.homes[hi].accounts.get_mut(&acct_key) {
                            a.tip = (bn, empty_hash);
                        }
                    }
                }
                let sealed = self.seal_for_requester(hi, flow, &handle_bytes(&acct.tip, acct.id));
                self.respond(flow, hi, rtx, Payload::Handle(sealed));
            }
            Err(e) => self.respond(flow, hi, rtx, Payload::Error(e.code().to_string())),
        }
    }

    fn on_retrieve_reply(
        &mut self,
        flow: u32,
        to: NodeId,
        result: Result<Vec<homechain_core::storage::Retrieved>, homechain_core::StorageError>,
        receipt: Option<Transaction>,
    ) {
        let NodeKind::Miner(hi) = self.node_kind(to) else {
            return;
        };
        match self.ctx.get(&flow).cloned() {
            Some(Ctx::Access { transform: tf, .. }) => {
                let Some(rtx) = self.resolved_tx(flow) else {
                    return;
                };
                match result {
                    Ok(blocks) => {
                        let t = tf
                            .as_deref()
                            .and_then(transform::lookup)
                            .unwrap_or(&transform::Identity);
                        let out: Vec<Vec<u8>> = blocks.iter().map(|b| t.apply(&b.data)).collect();
                        self.comp(flow, out.len() as u64);
                        let bytes = serde_json::to_vec(&out).expect("byte lists serialize");
                        let sealed = self.seal_for_requester(hi, flow, &bytes);
                        self.respond(flow, hi, rtx, Payload::Data(sealed));
                    }
                    Err(e) => self.respond(flow, hi, rtx, Payload::Error(e.code().to_string())),
                }
            }
            Some(Ctx::Breach { device, .. }) => {
                self.on_breach_reply(flow, hi, device, result, receipt)
            }
            _ => {}
        }
    }

    fn on_requester_response(&mut self, flow: u32, tx: Transaction, payload: Payload) {
        let Some(Ctx::Access {
            requester,
            key,
            home,
            device,
            target,
            monitor,
            ..
        }) = self.ctx.get(&flow).cloned()
        else {
            return;
        };
        let shared = derive_shared_key(
            self.provider.as_ref(),
            &key.private,
            self.homes[home].miner.public_key(),
        )
        .ok();
        let open = |w: &World, sealed: &[u8]| -> Option<Vec<u8>> {
            decrypt_token(w.provider.as_ref(), shared.as_ref()?, sealed).ok()
        };
        let _ = tx;
        match payload {
            Payload::Denied => self.set_outcome(flow, FlowOutcome::Denied),
            Payload::Error(e) => self.set_outcome(flow, FlowOutcome::Rejected(e)),
            Payload::Handle(sealed) => {
                self.comp(flow, 1);
                match open(self, &sealed).as_deref().and_then(parse_handle) {
                    Some((handle, account)) => {
                        let si = self.homes[home].storages[&target];
                        self.requesters[requester].leaked.insert(
                            (home, device),
                            Leak {
                                storage: si,
                                account,
                                handle,
                            },
                        );
                        self.set_detail(flow, "handle");
                        self.set_outcome(flow, FlowOutcome::Ok);
                    }
                    None => self.set_outcome(flow, FlowOutcome::Rejected("unreadable".into())),
                }
            }
            Payload::Data(sealed) => {
                self.comp(flow, 1);
                match open(self, &sealed) {
                    Some(bytes) => {
                        if monitor {
                            if let Some(Ctx::Access { received, .. }) = self.ctx.get_mut(&flow) {
                                *received += 1;
                            }
                            self.set_detail(flow, "readings:1");
                        } else {
                            let n = serde_json::from_slice::<Vec<Vec<u8>>>(&bytes)
                                .map_or(0, |v| v.len());
                            self.set_detail(flow, format!("data:{n}"));
                        }
                        self.set_outcome(flow, FlowOutcome::Ok);
                    }
                    None => self.set_outcome(flow, FlowOutcome::Rejected("unreadable".into())),
                }
            }
        }
    }

    fn on_reading(&mut self, flow: u32, to: NodeId, data: Vec<u8>) {
        let NodeKind::Miner(hi) = self.node_kind(to) else {
            return;
        };
        let Some(Ctx::Access { received, .. }) = self.ctx.get(&flow).cloned() else {
            return;
        };
        let Some(rtx) = self.resolved_tx(flow) else {
            return;
        };
        let sealed = self.seal_for_requester(hi, flow, &data);
        let first = !self.flows[flow as usize]
            .hops
            .iter()
            .any(|h| h.msg == "reading" && h.tick < self.now);
        let _ = received;
        if first {
            self.respond(flow, hi, rtx, Payload::Data(sealed));
        } else {
            let home = self.homes[hi].node;
            if let Some(ch) = self.overlay.ch_of(self.homes[hi].cluster) {
                self.send(flow, home, ch, Msg::MonitorData { sealed });
            }
        }
    }

    // ---- breach check ----

    pub(crate) fn start_breach_check(&mut self, hi: usize, device: DeviceId) -> u32 {
        let flow = self.new_flow(
            FlowKind::BreachCheck,
            false,
            Ctx::Breach {
                home: hi,
                device: device.clone(),
                reports: 0,
                flagged: 0,
                unverifiable: 0,
            },
        );
        let h = &self.homes[hi];
        let (Some(cref), Some(&si)) = (
            h.cloud_refs.get(&device).copied(),
            h.storages.get(&StorageKind::Cloud),
        ) else {
            self.set_outcome(flow, FlowOutcome::Rejected("no-cloud-store".into()));
            return flow;
        };
        let acct = h.accounts[&(StorageKind::Cloud, h.account_key(&device))];
        let (home, storage) = (h.node, self.storages[si].node);
        self.send(
            flow,
            home,
            storage,
            Msg::Retrieve {
                account: acct.id,
                handle: cref.handle,
                window: 1,
            },
        );
        flow
    }

    fn on_breach_reply(
        &mut self,
        flow: u32,
        hi: usize,
        device: DeviceId,
        result: Result<Vec<homechain_core::storage::Retrieved>, homechain_core::StorageError>,
        receipt: Option<Transaction>,
    ) {
        let blocks = match result {
            Ok(b) => b,
            Err(e) => {
                self.set_outcome(flow, FlowOutcome::Rejected(e.code().to_string()));
                return;
            }
        };
        let cref = self.homes[hi].cloud_refs[&device];
        self.comp(flow, 1 + receipt.is_some() as u64);
        let Some(returned) = blocks.first() else {
            self.set_outcome(flow, FlowOutcome::Rejected("nothing-returned".into()));
            return;
        };
        if hash_bytes(&returned.data) == cref.handle.1 {
            self.set_detail(flow, "breach=clean");
            self.set_outcome(flow, FlowOutcome::Ok);
            return;
        }
        let Some(receipt) = receipt else {
            self.set_outcome(flow, FlowOutcome::Rejected("no-receipt".into()));
            return;
        };
        let h = &mut self.homes[hi];
        h.unrecoverable.insert(device.clone());
        let mut report = Transaction::new(TxKind::BreachReport, self.now)
            .with_device(device)
            .with_refs(cref.signed_hash, receipt.id())
            .with_signer(h.miner.public_key().clone());
        report
            .sign_slot(self.provider.as_ref(), 0, h.miner.private_key())
            .expect("miner owns slot 0");
        let mut targets = vec![h.cluster];
        let cloud = h.storages[&StorageKind::Cloud];
        self.comp(flow, 1);
        if let Some(c) = self.storages[cloud].cluster {
            if !targets.contains(&c) {
                targets.push(c);
            }
        }
        let mut others: Vec<ClusterId> = (0..self.overlay.len() as u32)
            .map(ClusterId)
            .filter(|c| !targets.contains(c) && self.overlay.head(*c).is_some())
            .collect();
        for _ in 0..self.scenario.topology.breach_fanout {
            if others.is_empty() {
                break;
            }
            let i = self.rng.gen_range(0..others.len());
            targets.push(others.remove(i));
        }
        let home = self.homes[hi].node;
        for c in targets {
            if let Some(ch) = self.overlay.ch_of(c) {
                self.bump("breach_reports");
                if let Some(Ctx::Breach { reports, .. }) = self.ctx.get_mut(&flow) {
                    *reports += 1;
                }
                self.send(
                    flow,
                    home,
                    ch,
                    Msg::BreachReport {
                        report: report.clone(),
                        evidence: vec![receipt.clone()],
                    },
                );
            }
        }
        let storage_pk = self.storages[cloud].store.public_key().clone();
        let tampered = self.storages[cloud]
            .tampered
            .iter()
            .any(|(_, bn)| *bn == cref.handle.0);
        if !tampered {
            self.bump("false_breach_reports");
        }
        let _ = storage_pk;
        self.set_detail(flow, "breach=detected");
        self.set_outcome(flow, FlowOutcome::Ok);
    }

    // ---- mining ----

    /// Storage-style signed hashes issued by the CH of `c`. The first `bad`
    /// carry corrupted signatures.
    pub fn synthetic_signed_hashes(
        &mut self,
        c: ClusterId,
        n: usize,
        bad: usize,
    ) -> Vec<Transaction> {
        let Some(key) = self.overlay.head(c).map(|h| h.key().clone()) else {
            return Vec::new();
        };
        let now = self.now;
        (0..n)
            .map(|i| {
                let mut tx = Transaction::new(
                    TxKind::SignedHash {
                        context: SignedHashContext::StoredData {
                            account: AccountId(i as u64),
                        },
                    },
                    now,
                )
                .with_data_hash(hash_bytes(
                    format!("{}/{now}/{i}/{}", c.0, self.flows.len()).as_bytes(),
                ))
                .with_signer(key.public.clone());
                tx.sign_slot(self.provider.as_ref(), 0, &key.private)
                    .expect("signer owns slot 0");
                if i < bad {
                    if let Some(sig) = tx.slots[0].signature.as_mut() {
                        sig[0] ^= 0xff;
                    }
                }
                tx
            })
            .collect()
    }

    fn start_pending_mining(&mut self, c: ClusterId) {
        let Some(cos) = self.overlay.successor(c) else {
            return;
        };
        let Some(cos_pk) = self.overlay.head(cos).map(|h| h.public_key().clone()) else {
            return;
        };
        let provider = self.provider.clone();
        let now = self.now;
        let Some(block) = self
            .overlay
            .head_mut(c)
            .and_then(|h| h.mine(provider.as_ref(), &cos_pk, now))
        else {
            return;
        };
        self.launch_block(c, block, BTreeSet::new());
    }

    pub(crate) fn start_mining(
        &mut self,
        c: ClusterId,
        txs: Vec<Transaction>,
        colluders: BTreeSet<ClusterId>,
    ) -> Option<u32> {
        let cos = self.overlay.successor(c);
        let cos_pk = cos
            .and_then(|x| self.overlay.head(x))
            .map(|h| h.public_key().clone());
        let Some(cos_pk) = cos_pk else {
            let flow = self.new_flow(
                FlowKind::Mining,
                false,
                Ctx::Mining {
                    miner: c,
                    block: homechain_core::BlockId(hash_bytes(b"")),
                    colluders,
                    detected: false,
                },
            );
            self.set_outcome(flow, FlowOutcome::Rejected("no-cosigner".into()));
            return Some(flow);
        };
        let provider = self.provider.clone();
        let now = self.now;
        let block = self
            .overlay
            .head_mut(c)
            .and_then(|h| h.mine_with(provider.as_ref(), txs, &cos_pk, now))?;
        Some(self.launch_block(c, block, colluders))
    }

    fn launch_block(&mut self, c: ClusterId, block: Block, colluders: BTreeSet<ClusterId>) -> u32 {
        let flow = self.new_flow(
            FlowKind::Mining,
            false,
            Ctx::Mining {
                miner: c,
                block: block.id(),
                colluders,
                detected: false,
            },
        );
        self.comp(flow, 1);
        let me = self.overlay.ch_of(c).expect("miner has a CH");
        let next = self
            .overlay
            .successor(c)
            .and_then(|n| self.overlay.ch_of(n));
        match next {
            Some(n) => self.send(flow, me, n, Msg::Block { block, relay: None }),
            None => self.set_outcome(flow, FlowOutcome::Rejected("no-cosigner".into())),
        }
        flow
    }

    fn on_block(&mut self, flow: u32, to: NodeId, mut block: Block, relay: Option<PublicKey>) {
        let Some(c) = self.overlay.cluster_headed_by(to) else {
            return;
        };
        let Some(Ctx::Mining {
            miner, colluders, ..
        }) = self.ctx.get(&flow).cloned()
        else {
            return;
        };
        if c == miner {
            return;
        }
        let provider = self.provider.clone();
        let Some(h) = self.overlay.head_mut(c) else {
            return;
        };
        let me = h.public_key().clone();
        let my_slot = block.trust_multisig().is_some_and(|ms| {
            ms.slots
                .iter()
                .any(|s| s.signer == me && s.signature.is_none())
        });
        let (failed, cosigned) = if colluders.contains(&c) {
            let ok = my_slot && block.cosign(provider.as_ref(), &h.key().private).is_ok();
            (false, ok)
        } else {
            let r = h.receive_block(provider.as_ref(), &mut block, relay.as_ref(), &mut self.rng);
            self.flows[flow as usize].comp_ops += r.sig_checks as u64;
            match r.verdict {
                Verdict::Kept => self.bump("blocks_kept"),
                Verdict::Discarded(_) => self.bump("blocks_discarded"),
                Verdict::Failed { .. } => self.bump("blocks_failed"),
            }
            (matches!(r.verdict, Verdict::Failed { .. }), r.cosigned)
        };
        if failed {
            if let Some(Ctx::Mining { detected, .. }) = self.ctx.get_mut(&flow) {
                *detected = true;
            }
            self.set_outcome(flow, FlowOutcome::Rejected("fake-block-detected".into()));
            self.bump("alarms");
            let others: Vec<NodeId> = (0..self.overlay.len() as u32)
                .filter(|k| *k != c.0)
                .filter_map(|k| self.overlay.ch_of(ClusterId(k)))
                .collect();
            for o in others {
                self.send(
                    flow,
                    to,
                    o,
                    Msg::Alarm {
                        block: block.clone(),
                        accuser: me.clone(),
                    },
                );
            }
            return;
        }
        if cosigned {
            if let Some(mch) = self.overlay.ch_of(miner) {
                self.send(
                    flow,
                    to,
                    mch,
                    Msg::CosignReply {
                        block: block.clone(),
                    },
                );
            }
        }
        if let Some(next) = self.overlay.successor(c) {
            if next != miner {
                if let Some(n) = self.overlay.ch_of(next) {
                    self.send(
                        flow,
                        to,
                        n,
                        Msg::Block {
                            block,
                            relay: Some(me),
                        },
                    );
                }
            }
        }
    }

    // ---- join ----

    fn start_join(
        &mut self,
        hi: usize,
        blocks: usize,
        txs_per_block: usize,
        source: JoinSource,
    ) -> u32 {
        let overlay = source == JoinSource::Overlay;
        let now = self.now;
        let (signer, src) = match source {
            JoinSource::Local => (
                homechain_core::KeyPair {
                    public: self.homes[hi].miner.public_key().clone(),
                    private: self.homes[hi].miner.private_key().clone(),
                },
                Some(self.homes[hi].node),
            ),
            JoinSource::Overlay => {
                let c = self.homes[hi].cluster;
                match self.overlay.head(c) {
                    Some(h) => (h.key().clone(), Some(h.ch)),
                    None => (self.homes[hi].owner.clone(), None),
                }
            }
        };
        let policy = self.homes[hi].miner.policy().clone();
        let mut chain = Vec::with_capacity(blocks);
        let mut prev = None;
        for b in 0..blocks {
            let txs: Vec<Transaction> = (0..txs_per_block)
                .map(|i| {
                    let mut tx = Transaction::new(
                        TxKind::Store {
                            target: StorageKind::Local,
                        },
                        now,
                    )
                    .with_device(DeviceId::new("join"))
                    .with_data_hash(hash_bytes(format!("join/{b}/{i}").as_bytes()))
                    .with_signer(signer.public.clone());
                    tx.sign_slot(self.provider.as_ref(), 0, &signer.private)
                        .expect("signer owns slot 0");
                    tx
                })
                .collect();
            let block = Block {
                prev,
                header: BlockHeader::Policy(policy.clone()),
                txs,
                miner: signer.public.clone(),
            };
            prev = Some(block.id());
            chain.push(block);
        }
        let name = format!("{}/joiner-{}", self.homes[hi].name, self.flows.len());
        let joiner = self.add_runtime_node(name, NodeKind::Joiner { home: hi, overlay });
        let flow = self.new_flow(
            FlowKind::Join,
            false,
            Ctx::Join {
                home: hi,
                joiner,
                blocks: chain,
                received: 0,
                busy_until: now,
            },
        );
        match src {
            Some(s) => self.send(flow, joiner, s, Msg::JoinRequest),
            None => self.set_outcome(flow, FlowOutcome::Rejected("no-source".into())),
        }
        flow
    }

    fn on_join_request(&mut self, flow: u32, at: NodeId, joiner: NodeId) {
        let Some(Ctx::Join { blocks, .. }) = self.ctx.get(&flow).cloned() else {
            return;
        };
        if blocks.is_empty() {
            self.set_outcome(flow, FlowOutcome::Ok);
            return;
        }
        for block in blocks {
            self.send(flow, at, joiner, Msg::BlockDownload { block });
        }
    }

    fn on_block_download(&mut self, flow: u32, block: Block) {
        let checks = block
            .txs
            .iter()
            .filter(|t| validate_tx_signatures(self.provider.as_ref(), t).is_ok())
            .count();
        self.comp(flow, block.txs.len() as u64);
        let now = self.now;
        let Some(Ctx::Join {
            blocks,
            received,
            busy_until,
            ..
        }) = self.ctx.get_mut(&flow)
        else {
            return;
        };
        let _ = checks;
        *busy_until = (*busy_until).max(now) + block.txs.len() as u64;
        *received += 1;
        if *received == blocks.len() {
            let at = *busy_until;
            self.timer(at, Timer::JoinDone { flow });
        }
    }

    // ---- device messages and forged chains ----

    fn start_device_message(&mut self, hi: usize, from: DeviceId, to: DeviceId) -> u32 {
        let flow = self.new_flow(
            FlowKind::DeviceMessage,
            false,
            Ctx::DeviceMessage { home: hi },
        );
        let key = self.homes[hi].miner.device_message(&from, &to).cloned();
        match key {
            Ok(k) => {
                let text = format!("{from}->{to}@{}", self.now);
                let sealed =
                    encrypt_token(self.provider.as_ref(), &k, text.as_bytes(), &mut self.rng);
                self.comp(flow, 1);
                let (a, b) = (self.device_node(hi, &from), self.device_node(hi, &to));
                self.send(flow, a, b, Msg::DeviceMessage { sealed });
            }
            Err(e) => self.set_outcome(flow, FlowOutcome::Rejected(e.code().to_string())),
        }
        flow
    }

    fn start_fake_chain(&mut self, ri: usize, hi: usize, device: DeviceId) -> u32 {
        let flow = self.new_flow(FlowKind::FakeChain, true, Ctx::FakeChain { requester: ri });
        let Some(leak) = self.requesters[ri].leaked.get(&(hi, device)).copied() else {
            self.bump("fake_chain_no_handle");
            self.set_outcome(flow, FlowOutcome::Rejected("no-handle".into()));
            return flow;
        };
        let data = b"forged by requester".to_vec();
        let claimed = Some(hash_bytes(&data));
        let random_id = Some(self.registry.allocate(&mut self.rng));
        let (from, to) = (self.requesters[ri].node, self.storages[leak.storage].node);
        self.send(
            flow,
            from,
            to,
            Msg::StoreRequest {
                account: leak.account,
                prev: leak.handle,
                data,
                claimed,
                random_id,
            },
        );
        flow
    }
}
