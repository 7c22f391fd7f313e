use dmprune_bench::{synthetic_alloc, synthetic_layer};
use dmprune_core::allocator::{dp_allocate, Budget};
use dmprune_core::hessian::FisherMode;

#[test]
fn layers_are_seeded() {
    let a = synthetic_layer(64, 8, FisherMode::Dense, 3);
    let b = synthetic_layer(64, 8, FisherMode::Dense, 3);
    let c = synthetic_layer(64, 8, FisherMode::Dense, 4);
    assert_eq!(a.weight, b.weight);
    assert_eq!(a.order, b.order);
    assert_ne!(a.weight, c.weight);
    assert!(a.fisher.is_dense());
    assert!(!synthetic_layer(64, 8, FisherMode::Factor, 3).fisher.is_dense());
}

#[test]
fn alloc_curves_are_usable() {
    let layers = synthetic_alloc(4, 256, 10, 1);
    assert_eq!(layers.len(), 4);
    for l in &layers {
        assert_eq!(l.counts.len(), l.delta.len());
        assert_eq!(l.delta[0], 0.0);
        assert!(l.delta.windows(2).all(|w| w[0] <= w[1]));
    }
    assert!(dp_allocate(&layers, Budget::PruneCount(512)).is_ok());
    assert!(dp_allocate(&layers, Budget::flops_ratio(0.5)).is_ok());
}
