#![no_main]

use libfuzzer_sys::fuzz_target;
use ncdeon::container::Container;
use ncdeon::pde_data::{OperatorDataset, DATASET_MAGIC};

fuzz_target!(|data: &[u8]| {
    let Ok(c) = Container::from_bytes(data, Some(DATASET_MAGIC)) else {
        return;
    };
    if let Ok(ds) = OperatorDataset::from_container(&c) {
        let again = ds.to_container().unwrap().to_bytes();
        let back = OperatorDataset::from_container(&Container::from_bytes(&again, Some(DATASET_MAGIC)).unwrap()).unwrap();
        assert_eq!(back.to_container().unwrap().to_bytes(), again);
    }
});
