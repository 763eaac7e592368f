#![no_main]

use libfuzzer_sys::fuzz_target;
use parity_lab::data::SparseBatch;

fuzz_target!(|data: &[u8]| {
    if let Ok(batch) = SparseBatch::read_csv(data) {
        for row in batch.rows() {
            assert!(row.windows(2).all(|w| w[0] < w[1]));
            assert!(row.iter().all(|&i| (i as usize) < batch.n()));
        }
        // The writer emits every entry, so only round-trip small batches.
        if batch.m() * batch.n() <= 100_000 {
            let mut out = Vec::new();
            batch.write_csv(&mut out).expect("accepted batches serialize");
            let again = SparseBatch::read_csv(out.as_slice()).expect("serialized batches parse");
            assert_eq!((batch.n(), batch.m()), (again.n(), again.m()));
            assert!(batch.rows().eq(again.rows()));
        }
    }
});
