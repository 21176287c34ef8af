#![no_main]

use libfuzzer_sys::fuzz_target;
use ragforge::corpus::parse_qa;

fuzz_target!(|data: &[u8]| {
    if let Ok(qa) = parse_qa(data, 101) {
        for ex in qa {
            assert!(!ex.answer_token_ids.is_empty());
            assert!(ex.question_token_ids.iter().chain(&ex.answer_token_ids).all(|&t| t < 101));
        }
    }
});
