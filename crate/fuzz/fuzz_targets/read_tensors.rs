#![no_main]
use libfuzzer_sys::fuzz_target;
use protovit::tensor::{read_tensors, write_tensors};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = read_tensors(data) {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).expect("parsed tensors serialize");
        // bytes past the last tensor are ignored, so compare the prefix
        assert_eq!(&data[..buf.len()], &buf[..]);
    }
});
