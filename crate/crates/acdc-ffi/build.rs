use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR is set");
    let header = PathBuf::from(&crate_dir).join("include").join("acdc.h");

    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let bindings = cbindgen::generate(&crate_dir).expect("cbindgen parses the crate");
    // write_to_file leaves the file untouched when the content is unchanged,
    // so a clean checkout does not dirty the committed header.
    bindings.write_to_file(header);
}
