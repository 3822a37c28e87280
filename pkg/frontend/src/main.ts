import { ReaderStudyApi } from "./api";
import { ReaderApp } from "./app";

const root = document.getElementById("app");
if (root instanceof HTMLElement) {
  const app = new ReaderApp(root, new ReaderStudyApi(""));
  void app.start();
}
