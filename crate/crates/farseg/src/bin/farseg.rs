fn main() {
    println!("farseg CLI placeholder");
}
