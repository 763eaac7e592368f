#![no_main]

use libfuzzer_sys::fuzz_target;
use parity_lab::trainer::TrainTrace;

fuzz_target!(|data: &[u8]| {
    let _ = TrainTrace::read_csv(data);
});
