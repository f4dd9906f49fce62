#![no_main]

use libfuzzer_sys::fuzz_target;
use skelae::graph::SkeletonGraph;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = SkeletonGraph::parse_bone_list(text, None) {
        // Laplacian rows sum to zero and the trace is twice the bone count.
        let m = g.joints();
        for row in g.laplacian().chunks(m.max(1)) {
            assert_eq!(row.iter().sum::<f64>(), 0.0);
        }
        assert_eq!(g.trace(), 2.0 * g.edges().len() as f64);
    }
});
