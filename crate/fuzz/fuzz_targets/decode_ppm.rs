#![no_main]
use libfuzzer_sys::fuzz_target;
use protovit::data::{decode_ppm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_ppm(data) {
        assert_eq!(img.data.len(), img.channels * img.height * img.width);
        let again = decode_ppm(&encode_ppm(&img)).expect("re-encoded image decodes");
        assert_eq!(again, img);
    }
});
