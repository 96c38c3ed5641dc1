mod common;

use common::checklist;

#[test]
fn row_2_device_transactions_chain_to_previous() {
    checklist::per_device_chaining().unwrap();
}

#[test]
fn row_3_overlay_blocks_carry_other_nodes_transactions() {
    checklist::overlay_mines_arbitrary_txs().unwrap();
}

#[test]
fn row_4_mining_needs_no_puzzle() {
    checklist::no_puzzle().unwrap();
}

#[test]
fn row_5_owner_may_fork() {
    checklist::forking_allowed().unwrap();
}

#[test]
fn row_10_local_blocks_carry_policy_header() {
    checklist::policy_headers().unwrap();
}

#[test]
fn row_11_miners_keep_all_blocks_heads_keep_some() {
    checklist::stored_blocks().unwrap();
}

#[test]
fn row_13_only_owner_controls_chain() {
    checklist::owner_control().unwrap();
}

#[test]
fn row_16_each_transaction_in_one_block_per_chain() {
    checklist::one_block_per_tx().unwrap();
}
