use std::env;
use std::fs;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let out_dir = PathBuf::from(env::var("OUT_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml")).expect("cbindgen.toml");
    let bindings = cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("unable to generate C bindings");
    bindings.write_to_file(out_dir.join("pcn.h"));

    // Keep a copy next to the sources for C consumers; only touch it on change.
    let include = crate_dir.join("include");
    fs::create_dir_all(&include).unwrap();
    let fresh = fs::read(out_dir.join("pcn.h")).unwrap();
    let target = include.join("pcn.h");
    if fs::read(&target).ok().as_deref() != Some(fresh.as_slice()) {
        fs::write(&target, fresh).unwrap();
    }
}
