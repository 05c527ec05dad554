use proptest::prelude::*;

use superpipe::arena::{
    transfer_duration, AllocTag, ArenaConfig, Clock, DeviceArena, Direction, TransferChannel, TransferMode,
    TransferRequest,
};
use superpipe::engine::{activation_bytes, forward_flops, run_inference};
use superpipe::model::{build_model, Tensor};
use superpipe::scheduler::{execution_stream, Strategy, StrategyConfig};
use superpipe::trace::{audit, Trace, TraceKind};

fn arena_cfg(capacity: u64) -> ArenaConfig {
    ArenaConfig {
        capacity_bytes: capacity,
        h2d_bandwidth: 100.0,
        d2h_bandwidth: 50.0,
        per_call_latency: 0.5,
        device_compute_rate: 10.0,
        host_compute_rate: 1.0,
    }
}

fn strategy_for(n: usize, pick: usize, k: usize, kp: usize) -> Strategy {
    match pick % 4 {
        0 => Strategy::Standard,
        1 => Strategy::CpuOnly,
        2 => Strategy::Naive { k: 1 + k % n },
        _ if n >= 2 => {
            let k = 2 + k % (n - 1);
            Strategy::Superpipeline {
                k,
                k_prime: 1 + kp % (k - 1),
            }
        }
        _ => Strategy::Standard,
    }
}

proptest! {
    #[test]
    fn ledger_is_conserved(ops in prop::collection::vec((0u64..40, any::<bool>()), 1..60)) {
        let mut arena = DeviceArena::new(arena_cfg(100));
        let mut live = Vec::new();
        for (bytes, free) in ops {
            if free && !live.is_empty() {
                let (h, b) = live.swap_remove(0);
                prop_assert_eq!(arena.free(h).unwrap(), b);
            } else if let Ok(h) = arena.alloc(bytes, AllocTag::Weights(0)) {
                live.push((h, bytes));
            } else {
                prop_assert!(arena.resident_bytes() + bytes > 100);
            }
            let sum: u64 = live.iter().map(|(_, b)| b).sum();
            prop_assert_eq!(arena.resident_bytes(), sum);
            prop_assert_eq!(arena.ledger_sum(), sum);
            prop_assert!(arena.resident_bytes() <= arena.capacity());
        }
    }

    #[test]
    fn channel_is_fifo(reqs in prop::collection::vec((1usize..5, 0.0f64..10.0), 1..12)) {
        let cfg = arena_cfg(0);
        let mut clock = Clock::new();
        let mut channel = TransferChannel::new(Direction::HostToDevice);
        let mut last_end = 0.0f64;
        let mut issue = 0.0f64;
        for (i, (items, gap)) in reqs.into_iter().enumerate() {
            issue += gap;
            let req = TransferRequest::new(Direction::HostToDevice, (0..items).collect(), TransferMode::Sequential, issue);
            let sizes = vec![25u64; items];
            let t = channel.enqueue(&mut clock, &req, &sizes, &cfg, (i * 10) as u64);
            prop_assert!(t.start >= last_end);
            prop_assert!(t.start >= issue);
            prop_assert!(t.item_ends.windows(2).all(|w| w[0] <= w[1]));
            last_end = *t.item_ends.last().unwrap();
            prop_assert_eq!(channel.free_at(), last_end);
        }
        let mut prev = 0.0f64;
        while let Some(e) = clock.pop() {
            prop_assert!(e.time >= prev);
            prev = e.time;
        }
    }

    #[test]
    fn batch_never_slower(items in 1usize..9, latency in 0.0f64..3.0, size in 1u64..500) {
        let mut cfg = arena_cfg(0);
        cfg.per_call_latency = latency;
        let sizes = vec![size; items];
        let seq = TransferRequest::new(Direction::DeviceToHost, (0..items).collect(), TransferMode::Sequential, 0.0);
        let batch = TransferRequest::new(Direction::DeviceToHost, (0..items).collect(), TransferMode::Batch, 0.0);
        let gap = transfer_duration(&seq, &sizes, &cfg) - transfer_duration(&batch, &sizes, &cfg);
        prop_assert!(gap >= 0.0);
        prop_assert!((gap - (items - 1) as f64 * latency).abs() < 1e-9);
    }

    #[test]
    fn every_strategy_finishes_in_stream_order(
        n in 1usize..7,
        d in 1usize..5,
        items in 1usize..4,
        pick in 0usize..4,
        k in 0usize..8,
        kp in 0usize..8,
        batch in any::<bool>(),
    ) {
        let model = build_model(9, n, d, 0).unwrap();
        let s = model.weight_bytes_per_layer();
        let mode = if batch { TransferMode::Batch } else { TransferMode::Sequential };
        let cfg = StrategyConfig::new(strategy_for(n, pick, k, kp), mode);
        let capacity = n as u64 * s + activation_bytes(1, d);
        let inputs: Vec<Tensor> = (0..items).map(|i| Tensor::random(9, i as u64, 1, d)).collect();
        let run = run_inference(&model, &inputs, &cfg, &arena_cfg(capacity)).unwrap();
        prop_assert_eq!(run.trace.compute_steps(), execution_stream(n, items));
        audit(&run.trace, &run.replay, capacity).unwrap();
        let parsed = Trace::from_csv_str(&run.trace.to_csv_string()).unwrap();
        prop_assert_eq!(parsed, run.trace);
    }
}

#[test]
fn standard_only_stalls_during_prologue() {
    let n = 6;
    let d = 4;
    let model = build_model(5, n, d, 0).unwrap();
    let s = model.weight_bytes_per_layer();
    let t_compute = 1.0;
    let cfg = ArenaConfig {
        capacity_bytes: n as u64 * s + activation_bytes(1, d),
        h2d_bandwidth: s as f64 / 2.5,
        d2h_bandwidth: s as f64 / 5.0,
        per_call_latency: 0.25,
        device_compute_rate: forward_flops(1, d) / t_compute,
        host_compute_rate: forward_flops(1, d) / 16.0,
    };
    let inputs: Vec<Tensor> = (0..4).map(|i| Tensor::random(5, i, 1, d)).collect();
    for mode in [TransferMode::Sequential, TransferMode::Batch] {
        let strategy = StrategyConfig::new(Strategy::Standard, mode);
        let run = run_inference(&model, &inputs, &strategy, &cfg).unwrap();
        let prologue_end = run.trace.of_kind(TraceKind::H2D).map(|e| e.t_end).fold(0.0, f64::max);
        assert!(run.trace.of_kind(TraceKind::Stall).all(|e| e.t_end <= prologue_end));
        assert_eq!(run.trace.of_kind(TraceKind::D2H).count(), 0);
        let computes: Vec<_> = run.trace.of_kind(TraceKind::Compute).collect();
        let second_item_start = computes[n].t_start;
        let last_end = computes.last().unwrap().t_end;
        assert_eq!(last_end - second_item_start, (3 * n) as f64 * t_compute);
    }
}
