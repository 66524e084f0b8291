#![no_main]

use libfuzzer_sys::fuzz_target;
use ncdeon::container::Container;
use ncdeon::operator::{OperatorModel, CHECKPOINT_MAGIC};

fuzz_target!(|data: &[u8]| {
    let Ok(c) = Container::from_bytes(data, Some(CHECKPOINT_MAGIC)) else {
        return;
    };
    if let Ok(m) = OperatorModel::from_container(&c) {
        let again = m.to_container().unwrap().to_bytes();
        let back = OperatorModel::from_container(&Container::from_bytes(&again, Some(CHECKPOINT_MAGIC)).unwrap()).unwrap();
        assert_eq!(back.to_container().unwrap().to_bytes(), again);
    }
});
